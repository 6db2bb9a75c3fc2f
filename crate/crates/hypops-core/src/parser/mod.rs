//! The `.sccp` model language: lexer, parser and canonical printer.
//!
//! ```text
//! param kt = 0.02;
//! size N = 1000;
//! var Xr : continuous init N;
//! var Xi : discrete init 2;
//! agent client {
//!   request: rate min(kr * Xr, N * ks * Xi) class continuous -> { Xr -= 1; Xt += 1; };
//! }
//! ```

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{validate, ModelError, Program};

mod grammar;
mod lexer;
mod print;

pub use print::pretty_print;

/// A positioned message. Lines and columns start at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

impl Diagnostic {
    pub fn new(line: u32, col: u32, message: String) -> Diagnostic {
        Diagnostic { line, col, message }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl core::error::Error for ParseError {}

/// Source text with its file name, for `file:line:col: message` reports.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub file: String,
    pub text: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl SourceModel {
    pub fn new(file: &str, text: &str) -> SourceModel {
        SourceModel { file: file.into(), text: text.into(), diagnostics: Vec::new() }
    }

    pub fn parse(&mut self) -> Option<Program> {
        match parse_model(&self.text) {
            Ok(p) => Some(p),
            Err(e) => {
                self.diagnostics = e.diagnostics;
                None
            }
        }
    }

    pub fn render_diagnostics(&self) -> String {
        let mut s = String::new();
        for d in &self.diagnostics {
            s.push_str(&alloc::format!("{}:{}\n", self.file, d));
        }
        s
    }
}

/// Parses and validates a model.
pub fn parse_model(text: &str) -> Result<Program, ParseError> {
    let tokens = lexer::lex(text).map_err(|d| ParseError { diagnostics: alloc::vec![d] })?;
    let mut p = grammar::Parser::new(tokens);
    let (program, positions) = p.program().map_err(|d| ParseError { diagnostics: alloc::vec![d] })?;
    if let Err(errs) = validate(&program) {
        let diagnostics = errs
            .0
            .iter()
            .map(|e| {
                let (line, col) = positions.locate(e);
                Diagnostic::new(line, col, alloc::format!("{e}"))
            })
            .collect();
        return Err(ParseError { diagnostics });
    }
    Ok(program)
}

/// Declaration sites, used to position validation errors.
#[derive(Debug, Default)]
pub(crate) struct Positions {
    pub names: Vec<(String, u32, u32)>,
}

impl Positions {
    fn find(&self, n: &str) -> Option<(u32, u32)> {
        self.names.iter().find(|(m, _, _)| m == n).map(|(_, l, c)| (*l, *c))
    }

    fn locate(&self, e: &ModelError) -> (u32, u32) {
        let key = match e {
            ModelError::DuplicateName(n) | ModelError::ReservedName(n) | ModelError::UnknownComponent(n) => {
                return self.names.iter().rev().find(|(m, _, _)| m == n).map(|(_, l, c)| (*l, *c)).unwrap_or((1, 1))
            }
            ModelError::InitDomain { var, .. } | ModelError::KindDomain { var, .. } => var.as_str(),
            ModelError::Assumption1Violation { action, .. }
            | ModelError::TimeOutsideInstantaneous { action }
            | ModelError::TimedGuardForm { action }
            | ModelError::DuplicateTarget { action, .. }
            | ModelError::BadTarget { action, .. } => action.as_str(),
            ModelError::UndeclaredVariable { context, .. } | ModelError::Eval { context, .. } => {
                // context reads "action `name`" or "init of `name`"
                context.split('`').nth(1).unwrap_or("")
            }
            ModelError::EmptyModel => return (1, 1),
        };
        self.find(key).unwrap_or((1, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionClass, Domain, VarKind};

    const CLIENT_SERVER: &str = "
        // client-server with breakdowns
        param kr = 2; param ks = 0.01; param kt = 1/50; param kb = 1/2000; param kf = 1/1000;
        size N = 1000;
        var Xr : continuous init N;
        var Xt : continuous init 0;
        var Xi : discrete init 2;
        var Xb : discrete init 0;
        agent client {
          request: rate min(kr * Xr, N * ks * Xi) class continuous -> { Xr -= 1; Xt += 1; };
          think: rate kt * Xt class continuous -> { Xr += 1; Xt -= 1; };
        }
        agent server {
          breakdown: rate kb * Xi -> { Xi -= 1; Xb += 1; };
          repair: rate kf * Xb -> { Xi += 1; Xb -= 1; };
        }";

    #[test]
    fn client_server_shape() {
        let p = parse_model(CLIENT_SERVER).unwrap();
        assert_eq!(p.components.len(), 2);
        assert_eq!(p.action_count(), 4);
        assert_eq!(p.variables.len(), 4);
        assert_eq!(p.param("kt"), Some(0.02));
        assert_eq!(p.size, Some(1000.0));
        assert_eq!(p.var("Xi").unwrap().kind, VarKind::Discrete);
        assert_eq!(p.components[0].actions[0].class, ActionClass::Continuous);
        assert_eq!(p.components[1].actions[0].class, ActionClass::Discrete);
    }

    #[test]
    fn discrete_init_must_be_integer() {
        let e = parse_model("var X : discrete init 1.5; agent a { t: rate 1 -> { X += 1; }; }").unwrap_err();
        assert_eq!(e.diagnostics.len(), 1);
        assert_eq!(e.diagnostics[0].line, 1);
        assert!(e.diagnostics[0].message.contains("outside its nat domain"), "{e}");
    }

    #[test]
    fn empty_file() {
        let e = parse_model("  // nothing\n").unwrap_err();
        assert!(e.to_string().contains("no agents"), "{e}");
    }

    #[test]
    fn syntax_error_position() {
        let e = parse_model("var X : discrete init 1;\nagent a { t rate 1 -> {}; }").unwrap_err();
        assert_eq!((e.diagnostics[0].line, e.diagnostics[0].col), (2, 13));
    }

    #[test]
    fn reserved_names() {
        assert!(parse_model("var N : discrete init 1; agent a { t: rate 1 -> {}; }").is_err());
        assert!(parse_model("var time : discrete init 1; agent a { t: rate 1 -> {}; }").is_err());
    }

    #[test]
    fn domain_keyword() {
        let p = parse_model("var X : continuous int init 0; var K : environment init 0; agent a { t: rate 1 -> { X -= 1; }; }")
            .unwrap();
        assert_eq!(p.var("X").unwrap().domain, Domain::Integer);
        assert_eq!(p.var("K").unwrap().domain, Domain::Real);
    }

    #[test]
    fn source_model_diagnostics_format() {
        let mut s = SourceModel::new("m.sccp", "agent {");
        assert!(s.parse().is_none());
        assert!(s.render_diagnostics().starts_with("m.sccp:1:7: "), "{}", s.render_diagnostics());
    }
}
