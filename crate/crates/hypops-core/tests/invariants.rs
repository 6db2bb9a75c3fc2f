//! Semantic invariants checked against independent oracles: a direct
//! multiset simulator for flattening, hand-written drifts for the bundled
//! models, the two-state chain's stationary law and per-event
//! conservation laws.

use std::path::PathBuf;

use hypops_core::ctmc::Observer;
use hypops_core::model::{ActionClass, NormMode};
use hypops_core::scaling::DEFAULT_SIZES;
use hypops_core::{assemble_pdmp, build_tdsha, check_scalings, parse_model, CtmcModel, CtmcOptions, EventKind, PdmpModel, Program};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(name: &str) -> Program {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name);
    parse_model(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn limit(p: &Program) -> PdmpModel {
    assemble_pdmp(&build_tdsha(p, NormMode::Limit).unwrap()).unwrap()
}

// -- flattening against a multiset-of-agents simulator -----------------------

const BACTERIA: &str = "
    param kr = 1;
    param kd = 0.5;
    var F : discrete nat init 3;
    agent bacterium {
      reproduce: [F > 0] rate kr -> { F -= 1; } then bacterium || bacterium;
      die: rate kd -> { } then 0;
    }
    system bacterium * 2;";

/// Each live agent is simulated on its own: it reproduces at rate 1 while
/// food lasts (eating one unit and leaving two agents) and dies at rate 0.5.
fn multiset_run(rng: &mut ChaCha8Rng, horizon: f64) -> (u32, u32) {
    let (kr, kd) = (1.0, 0.5);
    let mut food = 3u32;
    let mut agents: Vec<()> = vec![(); 2];
    let mut t = 0.0;
    loop {
        let per_agent = if food > 0 { kr + kd } else { kd };
        let total = per_agent * agents.len() as f64;
        if total == 0.0 {
            break;
        }
        t += -rng.random::<f64>().ln() / total;
        if t > horizon {
            break;
        }
        let who = rng.random_range(0..agents.len());
        let u = rng.random::<f64>() * per_agent;
        if food > 0 && u < kr {
            food -= 1;
            agents.push(());
        } else {
            agents.swap_remove(who);
        }
    }
    (food, agents.len() as u32)
}

#[test]
fn flattening_preserves_the_state_law() {
    const RUNS: usize = 100_000;
    let mut direct = std::collections::BTreeMap::<(u32, u32), f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..RUNS {
        *direct.entry(multiset_run(&mut rng, 1.0)).or_default() += 1.0 / RUNS as f64;
    }
    let p = parse_model(BACTERIA).unwrap();
    let m = CtmcModel::new(&p, None).unwrap();
    let (f, b) = (m.var_index("F").unwrap(), m.var_index("P_bacterium").unwrap());
    let opts = CtmcOptions::new(1.0);
    let mut flat = std::collections::BTreeMap::<(u32, u32), f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..RUNS {
        let tr = m.simulate(&opts, &mut rng, &mut ()).unwrap();
        let s = &tr.final_state.vals;
        *flat.entry((s[f] as u32, s[b] as u32)).or_default() += 1.0 / RUNS as f64;
    }
    let keys: std::collections::BTreeSet<_> = direct.keys().chain(flat.keys()).copied().collect();
    for k in keys {
        let (p1, p2) = (direct.get(&k).copied().unwrap_or(0.0), flat.get(&k).copied().unwrap_or(0.0));
        let se = ((p1 * (1.0 - p1) + p2 * (1.0 - p2)) / RUNS as f64).sqrt();
        assert!((p1 - p2).abs() <= 3.0 * se.max(1.0 / RUNS as f64), "state {k:?}: {p1} vs {p2} (se {se})");
    }
}

// -- scaling classification -------------------------------------------------

fn suggested(p: &Program) -> Vec<(String, ActionClass)> {
    let r = check_scalings(p, &DEFAULT_SIZES, 64, &mut ChaCha8Rng::seed_from_u64(3));
    assert!(r.passed(), "{r}");
    r.actions.iter().filter(|a| !a.instantaneous).map(|a| (a.action.clone(), a.suggested_class)).collect()
}

#[test]
fn scaling_check_classifies_the_bundled_models() {
    use ActionClass::{Continuous as C, Discrete as D};
    let fluid = suggested(&model("client_server_fluid.sccp"));
    assert!(fluid.iter().all(|(_, c)| *c == C), "{fluid:?}");
    let hybrid = suggested(&model("client_server_hybrid.sccp"));
    for (a, c) in &hybrid {
        let want = if a == "breakdown" || a == "repair" { D } else { C };
        assert_eq!(*c, want, "{a}");
    }
    // Actions that move M or the gene counters stay discrete.
    let gene = suggested(&model("gene_network.sccp"));
    for (a, c) in &gene {
        let want = if a == "make" || a == "protein" { C } else { D };
        assert_eq!(*c, want, "{a}: {gene:?}");
    }
}

// -- drift oracles ------------------------------------------------------------

/// Checks the model's field against `oracle` at 1000 random states. `set`
/// fills the program variables from uniform draws.
fn check_drift(
    m: &PdmpModel,
    set: &dyn Fn(&mut ChaCha8Rng, &mut [f64]),
    oracle: &dyn Fn(&dyn Fn(&str) -> f64) -> Vec<(&'static str, f64)>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let names: Vec<String> = m.tdsha.program.variables.iter().map(|v| v.name.clone()).collect();
    for _ in 0..1000 {
        let mut vals = m.initial_values().unwrap();
        set(&mut rng, &mut vals);
        let time = rng.random_range(0.0..50.0);
        let sig = m.signature(&vals, time).unwrap();
        let mut out = vec![0.0; m.ncoords()];
        m.drift(&vals, time, &sig, &mut out).unwrap();
        let get = |n: &str| vals[names.iter().position(|x| x == n).unwrap()];
        for (name, want) in oracle(&get) {
            let i = m.var_index(name).unwrap();
            let got = match m.flowing.iter().position(|&k| k == i) {
                Some(c) => out[c],
                None => 0.0,
            };
            let scale = 1.0 + want.abs();
            assert!((got - want).abs() <= 1e-12 * scale, "{name}: {got} vs {want} at {vals:?}");
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

#[test]
fn client_server_fluid_drift() {
    let m = limit(&model("client_server_fluid.sccp"));
    let set = |r: &mut ChaCha8Rng, v: &mut [f64]| {
        for x in v.iter_mut().take(4) {
            *x = uniform(r, 0.0, 100.0);
        }
    };
    check_drift(&m, &set, &|x| {
        let req = (2.0 * x("Xr")).min(0.8 * x("Xi"));
        let r = -req + x("Xt") / 50.0;
        let s = -x("Xi") / 2000.0 + x("Xb") / 1000.0;
        vec![("Xr", r), ("Xt", -r), ("Xi", s), ("Xb", -s)]
    });
}

#[test]
fn client_server_hybrid_drift() {
    for file in ["client_server_hybrid.sccp", "weibull_repair.sccp"] {
        let m = limit(&model(file));
        let set = |r: &mut ChaCha8Rng, v: &mut [f64]| {
            v[0] = uniform(r, 0.0, 1.0);
            v[1] = 1.0 - v[0];
            v[2] = r.random_range(0..3) as f64;
        };
        check_drift(&m, &set, &|x| {
            let r = -(2.0 * x("Xr")).min(0.01 * x("Xi")) + x("Xt") / 50.0;
            vec![("Xr", r), ("Xt", -r), ("Xi", 0.0)]
        });
    }
}

#[test]
fn tangential_drift() {
    let m = limit(&model("tangential.sccp"));
    let set = |r: &mut ChaCha8Rng, v: &mut [f64]| {
        for x in v.iter_mut().take(3) {
            *x = uniform(r, -10.0, 10.0);
        }
    };
    check_drift(&m, &set, &|x| vec![("X1", x("X2")), ("X2", x("X3") - 12.0), ("X3", 6.0)]);
}

#[test]
fn corner_and_size_dependent_drifts() {
    let m = limit(&model("corner_walk.sccp"));
    let set = |r: &mut ChaCha8Rng, v: &mut [f64]| {
        v[0] = uniform(r, 0.0, 2.0);
        v[1] = uniform(r, 0.0, 2.0);
    };
    check_drift(&m, &set, &|_| vec![("X", 1.0), ("Y", 1.0)]);
    let m = limit(&model("size_dependent_guards.sccp"));
    let set = |r: &mut ChaCha8Rng, v: &mut [f64]| v[0] = uniform(r, -1.0, 1.0);
    check_drift(&m, &set, &|_| vec![("X", 1.0)]);
}

#[test]
fn epidemic_drift() {
    let m = limit(&model("epidemic_sliding.sccp"));
    let set = |r: &mut ChaCha8Rng, v: &mut [f64]| {
        v[0] = uniform(r, 0.0, 1.0);
        v[1] = uniform(r, 0.0, 1.0 - v[0]);
        v[2] = 1.0 - v[0] - v[1];
        v[3] = r.random_range(1..3) as f64;
        v[4] = uniform(r, 0.0, 50.0);
    };
    check_drift(&m, &set, &|x| {
        let (xs, xi, xr) = (x("Xs"), x("Xi"), x("Xr"));
        let infect = 100.0 * xs * xi + xs.min(0.001);
        let patch = match (x("U") == 1.0, xi >= 0.1) {
            (true, _) => 0.05 * xi,
            (false, true) => 4.0 * xi,
            (false, false) => 0.5 * xi,
        };
        vec![("Xs", -infect + 0.1 * xr), ("Xi", infect - patch), ("Xr", patch - 0.1 * xr)]
    });
}

#[test]
fn gene_network_drift() {
    let m = limit(&model("gene_network.sccp"));
    let set = |r: &mut ChaCha8Rng, v: &mut [f64]| {
        v[0] = r.random_range(0..6) as f64;
        v[1] = uniform(r, 0.0, 10.0);
    };
    check_drift(&m, &set, &|x| vec![("P", x("M") - x("P")), ("M", 0.0)]);
}

// -- two-state chain ------------------------------------------------------------

#[test]
fn two_state_chain_stationary_law() {
    // On at rate a = 1, off at rate b = 2: P(off) = b / (a + b).
    let p = parse_model(
        "var X : discrete init 0;
         agent a { on: [X <= 0] rate 1 -> { X = 1; }; off: [X >= 1] rate 2 -> { X = 0; }; }",
    )
    .unwrap();
    let m = CtmcModel::new(&p, None).unwrap();
    struct OffTime {
        last: f64,
        off: f64,
        x: f64,
    }
    impl Observer for OffTime {
        fn event(&mut self, time: f64, _: usize, _: EventKind, state: &[f64]) {
            if self.x == 0.0 {
                self.off += time - self.last;
            }
            self.last = time;
            self.x = state[0];
        }
    }
    let mut opts = CtmcOptions::new(f64::INFINITY);
    opts.max_events = 1_000_000;
    let mut obs = OffTime { last: 0.0, off: 0.0, x: 0.0 };
    let tr = m.simulate(&opts, &mut ChaCha8Rng::seed_from_u64(5), &mut obs).unwrap();
    assert_eq!(tr.n_events, 1_000_000);
    let (a, b) = (1.0f64, 2.0f64);
    let p0 = obs.off / obs.last;
    // Asymptotic variance of a two-state occupation time average.
    let se = (2.0 * a * b / (a + b).powi(3) / obs.last).sqrt();
    assert!((p0 - b / (a + b)).abs() < 3.0 * se, "{p0} (se {se})");
}

// -- conservation per event -------------------------------------------------------

struct Conserved<'a> {
    groups: Vec<(Vec<usize>, f64)>,
    events: u64,
    name: &'a str,
}

impl Observer for Conserved<'_> {
    fn event(&mut self, time: f64, _: usize, _: EventKind, state: &[f64]) {
        self.events += 1;
        for (idx, total) in &self.groups {
            let s: f64 = idx.iter().map(|&i| state[i]).sum();
            assert_eq!(s, *total, "{} at t = {time}: {state:?}", self.name);
        }
    }
}

fn conserved(file: &str, size: f64, horizon: f64, groups: &[(&[&str], f64)]) {
    let p = model(file);
    let m = CtmcModel::new(&p, Some(size)).unwrap();
    let groups = groups.iter().map(|(names, t)| (names.iter().map(|n| m.var_index(n).unwrap()).collect(), *t)).collect();
    let mut obs = Conserved { groups, events: 0, name: file };
    for seed in 0..5 {
        m.simulate(&CtmcOptions::new(horizon), &mut ChaCha8Rng::seed_from_u64(seed), &mut obs).unwrap();
    }
    assert!(obs.events > 100, "{file}: {}", obs.events);
}

#[test]
fn populations_are_conserved_at_every_event() {
    conserved("client_server_hybrid.sccp", 100.0, 2000.0, &[(&["Xr", "Xt"], 100.0), (&["Xi", "Xb"], 2.0)]);
    conserved("client_server_fluid.sccp", 10.0, 500.0, &[(&["Xr", "Xt"], 1000.0), (&["Xi", "Xb"], 20.0)]);
    conserved("epidemic_sliding.sccp", 200.0, 30.0, &[(&["Xs", "Xi", "Xr"], 200.0)]);
    conserved("gene_network.sccp", 100.0, 200.0, &[(&["P_gene_on", "P_gene_off"], 1.0)]);
}
