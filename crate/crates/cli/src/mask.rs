use std::fs;

use anyhow::{bail, Context, Result};
use lion_core::masks::{build_fixed_mask, build_selective_mask};
use lion_core::oracle::{reference_mask, MAX_ORACLE_LEN};
use lion_core::{DecaySpec, Matrix, Vector};

use crate::MaskArgs;

/// Log-decays from a CSV file, flattened row-major.
fn read_log_decays(path: &std::path::Path) -> Result<Vector> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m = Matrix::from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Vector::new(m.into_vec())?)
}

fn oracle(spec: &DecaySpec, len: usize) -> Result<Matrix> {
    if len > MAX_ORACLE_LEN {
        bail!("--oracle supports at most {MAX_ORACLE_LEN} positions, got {len}");
    }
    spec.validate(len)?;
    Ok(reference_mask(spec, len))
}

pub fn cmd_mask(args: MaskArgs) -> Result<()> {
    let mask = match (args.fixed, &args.selective) {
        (Some(lambda), None) => {
            let Some(len) = args.length else {
                bail!("--fixed needs --length");
            };
            if len == 0 {
                bail!("--length must be at least 1");
            }
            if args.oracle {
                oracle(&DecaySpec::FixedScalar(lambda), len)?
            } else {
                build_fixed_mask(lambda, len)?.m
            }
        }
        (None, Some(path)) => {
            let log = read_log_decays(path)?;
            if let Some(len) = args.length {
                if len != log.len() {
                    bail!(
                        "--length {len} but {} holds {} log-decays",
                        path.display(),
                        log.len()
                    );
                }
            }
            if args.oracle {
                oracle(&DecaySpec::SelectiveScalar(log.map(f64::exp)), log.len())?
            } else {
                build_selective_mask(&log)?.m
            }
        }
        _ => bail!("exactly one of --fixed or --selective is required"),
    };
    let csv = mask.to_csv();
    match &args.out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    Ok(())
}
