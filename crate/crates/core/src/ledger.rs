//! Executable check that the derivation ledger in `docs/equation_ledger.csv`
//! points at operations and tests that actually exist in the source tree.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LedgerRow {
    pub anchor: String,
    pub operation: String,
    pub test: String,
}

#[derive(Debug, Clone)]
pub struct LedgerReport {
    pub rows: Vec<LedgerRow>,
    /// Human-readable descriptions of every broken reference.
    pub missing: Vec<String>,
}

impl LedgerReport {
    pub fn passed(&self) -> bool {
        self.missing.is_empty()
    }
}

fn module_source(repo_root: &Path, module: &str) -> Result<String> {
    let path = repo_root
        .join("crates/core/src")
        .join(format!("{module}.rs"));
    std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn has_fn(source: &str, name: &str) -> bool {
    source
        .match_indices(&format!("fn {name}"))
        .any(|(i, _)| {
            // require a word boundary after the name
            source[i + 3 + name.len()..]
                .chars()
                .next()
                .map_or(false, |c| c == '(' || c == '<')
        })
}

/// Parse and verify the ledger: every `module::op` and `module::tests::name`
/// reference must resolve to a function in that module's source file.
pub fn check_ledger(repo_root: &Path) -> Result<LedgerReport> {
    let csv = std::fs::read_to_string(repo_root.join("docs/equation_ledger.csv"))?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "ledger line {} has {} fields, expected 3",
                i + 1,
                fields.len()
            )));
        }
        let row = LedgerRow {
            anchor: fields[0].to_string(),
            operation: fields[1].to_string(),
            test: fields[2].to_string(),
        };
        for (what, path) in [("operation", &row.operation), ("test", &row.test)] {
            let parts: Vec<&str> = path.split("::").collect();
            if parts.len() < 2 {
                missing.push(format!("{}: malformed {what} '{path}'", row.anchor));
                continue;
            }
            let module = parts[0];
            let func = parts[parts.len() - 1];
            match module_source(repo_root, module) {
                Ok(src) if has_fn(&src, func) => {}
                Ok(_) => missing.push(format!(
                    "{}: {what} '{path}' not found in module '{module}'",
                    row.anchor
                )),
                Err(e) => missing.push(format!("{}: {e}", row.anchor)),
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("ledger has no data rows".into()));
    }
    Ok(LedgerReport { rows, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo_root() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../..")
            .canonicalize()
            .unwrap()
    }

    #[test]
    fn shipped_ledger_is_fully_resolved() {
        let report = check_ledger(&repo_root()).unwrap();
        assert!(report.rows.len() >= 15, "expected one row per equation");
        assert!(report.passed(), "broken references: {:?}", report.missing);
    }

    #[test]
    fn broken_reference_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("docs")).unwrap();
        std::fs::create_dir_all(dir.path().join("crates/core/src")).unwrap();
        std::fs::write(
            dir.path().join("crates/core/src/fusion.rs"),
            "pub fn real_op() {}\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("docs/equation_ledger.csv"),
            "anchor,operation,test\n\
             eq1,fusion::real_op,fusion::tests::no_such_test\n",
        )
        .unwrap();
        let report = check_ledger(dir.path()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.missing.len(), 1);
        assert!(report.missing[0].contains("no_such_test"));
    }

    #[test]
    fn malformed_row_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("docs")).unwrap();
        std::fs::write(
            dir.path().join("docs/equation_ledger.csv"),
            "anchor,operation,test\neq1,only_two_fields\n",
        )
        .unwrap();
        assert!(check_ledger(dir.path()).is_err());
    }
}
