use std::fmt::Write as _;

use spcl_core::mdp::{self, BackupKind, IterationOptions, TabularMdp};

use crate::args::SolveArgs;
use crate::config::write_resolved;
use crate::{CliError, RunLog};

/// Output files of one solve, as text.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutputs {
    pub values: String,
    pub policy: String,
    pub summary: String,
    pub bounds: String,
}

pub fn solve(mdp: &TabularMdp<f64>, kind: BackupKind, alpha: f64, tol: f64, max_iters: usize) -> Result<SolveOutputs, CliError> {
    let opts = IterationOptions { tol, max_iters };
    let result = mdp::value_iteration(mdp, kind, alpha, &opts, None)?;
    let policy = mdp::extract_policy(mdp, &result.values, kind, alpha)?;

    let mut values = String::from("state,value\n");
    for (x, v) in result.values.iter().enumerate() {
        let _ = writeln!(values, "{x},{v}");
    }
    let mut pol = String::from("state,action,prob\n");
    for x in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let _ = writeln!(pol, "{x},{a},{}", policy.prob(x, a));
        }
    }
    let support_max = policy.rows().iter().map(|r| r.support().len()).max().unwrap_or(0);
    let mut summary = String::from("key,value\n");
    for (k, v) in [
        ("kind", kind.to_string()),
        ("alpha", alpha.to_string()),
        ("gamma", mdp.gamma().to_string()),
        ("tol", format!("{tol:?}")),
        ("iterations", result.iterations.to_string()),
        ("residual", format!("{:?}", result.residual)),
        ("states", mdp.n_states().to_string()),
        ("actions", mdp.n_actions().to_string()),
        ("max_support", support_max.to_string()),
    ] {
        let _ = writeln!(summary, "{k},{v}");
    }

    let report = mdp::check_bounds(mdp, alpha)?;
    let n = mdp.n_actions() as f64;
    let mut bounds = String::from("policy,constant,bound,worst_gap\n");
    let _ = writeln!(bounds, "soft,{},{},{}", n.ln(), report.soft_bound, report.soft_gap);
    let _ = writeln!(bounds, "sparse,{},{},{}", (n - 1.0) / (2.0 * n), report.sparse_bound, report.sparse_gap);

    Ok(SolveOutputs {
        values,
        policy: pol,
        summary,
        bounds,
    })
}

pub fn run(args: &SolveArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.mdp)
        .map_err(|e| CliError::Usage(format!("cannot read `{}`: {e}", args.mdp.display())))?;
    let mdp = TabularMdp::<f64>::from_json(&text)?;
    let kind: BackupKind = args.kind.parse()?;
    write_resolved(&args.out, "solve", args)?;
    let mut log = RunLog::open(&args.out)?;
    log.line(&format!("solve start {}", args.mdp.display()));
    let out = solve(&mdp, kind, args.alpha, args.tol, args.max_iters)?;
    for (name, body) in [
        ("values.csv", &out.values),
        ("policy.csv", &out.policy),
        ("summary.csv", &out.summary),
        ("bounds.csv", &out.bounds),
    ] {
        std::fs::write(args.out.join(name), body)?;
    }
    log.line("solve done");
    print!("{}", out.summary);
    print!("{}", out.bounds);
    Ok(())
}
