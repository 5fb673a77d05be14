use std::collections::BTreeMap;

use anyhow::{bail, ensure, Result};
use lion_core::forms::{diagonal_attention, diagonal_bidirectional_rnn};
use lion_core::masks::diagonal_cum_factors;
use lion_core::numerics::max_rel_err;
use lion_core::oracle::{
    reference_diagonal_output, reference_mask, reference_output, MAX_ORACLE_LEN,
};
use lion_core::projections::{project, seeded_fixture, DecayFamily};
use lion_core::{DecaySpec, Matrix, MemoryCounter, MixerInputs, ScalingMode};
use serde::Serialize;

use crate::{
    fixture, parse_config, parse_forms, parse_mode, resolve_seed, CheckArgs, ToleranceExceeded,
};

#[derive(Debug, Serialize)]
pub struct CheckReport {
    pub config: String,
    #[serde(rename = "L")]
    pub len: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub chunk: usize,
    pub mode: String,
    pub tolerance: f64,
    /// Keyed `"a/b"`; each value is the larger of the two directed errors.
    pub max_rel_err: BTreeMap<String, f64>,
    pub pass: bool,
}

/// Pairwise errors between named outputs.
fn compare(outputs: &[(String, Matrix)]) -> BTreeMap<String, f64> {
    let mut errs = BTreeMap::new();
    for (i, (na, a)) in outputs.iter().enumerate() {
        for (nb, b) in &outputs[i + 1..] {
            errs.insert(
                format!("{na}/{nb}"),
                max_rel_err(a, b).max(max_rel_err(b, a)),
            );
        }
    }
    errs
}

pub fn cmd_check(args: CheckArgs) -> Result<()> {
    ensure!(args.chunk >= 1, "--chunk must be at least 1");
    ensure!(args.tolerance >= 0.0, "--tolerance must be non-negative");
    let forms = parse_forms(&args.forms)?;
    let (config, inputs) = match &args.fixture {
        Some(dir) => {
            let f = fixture::load(dir)?;
            (f.config, f.inputs)
        }
        None => {
            let cfg = parse_config(&args.config)?;
            ensure!(
                args.length >= 1 && args.dim >= 1,
                "--length and --dim must be at least 1"
            );
            let (x, w) = seeded_fixture(resolve_seed(args.seed)?, args.length, args.dim, &cfg);
            (cfg, project(&x, &w, &cfg)?)
        }
    };
    let mode = match &args.mode {
        Some(name) => parse_mode(name)?,
        None => config.scaling,
    };

    let outputs = if config.decay == DecayFamily::Diagonal {
        if mode != ScalingMode::None {
            bail!("diagonal decay is unscaled; --mode must be none");
        }
        diagonal_outputs(&inputs)?
    } else {
        let mut outputs = Vec::new();
        for form in forms {
            let y = form.run(&inputs, args.chunk, mode, &MemoryCounter::new())?;
            outputs.push((form.name().to_string(), y));
        }
        if inputs.len() <= MAX_ORACLE_LEN {
            let mask = reference_mask(&inputs.decay, inputs.len());
            let y = reference_output(&inputs.q, &inputs.k, &inputs.v, &mask, mode)?;
            outputs.push(("oracle".to_string(), y));
        }
        outputs
    };

    let errs = compare(&outputs);
    let worst = errs.values().copied().fold(0.0, f64::max);
    let pass = errs.values().all(|e| *e <= args.tolerance);
    let report = CheckReport {
        config: config.name().to_string(),
        len: inputs.len(),
        d: inputs.key_dim(),
        chunk: args.chunk,
        mode: mode.name().to_string(),
        tolerance: args.tolerance,
        max_rel_err: errs,
        pass,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if pass {
        Ok(())
    } else {
        Err(ToleranceExceeded {
            worst,
            tolerance: args.tolerance,
        }
        .into())
    }
}

fn diagonal_outputs(inputs: &MixerInputs) -> Result<Vec<(String, Matrix)>> {
    let DecaySpec::SelectiveDiagonal(decays) = &inputs.decay else {
        bail!("diagonal configuration without per-channel decay");
    };
    let factors = diagonal_cum_factors(decays)?;
    let mut outputs = vec![
        (
            "diagonal-attention".to_string(),
            diagonal_attention(inputs, &factors)?,
        ),
        (
            "diagonal-rnn".to_string(),
            diagonal_bidirectional_rnn(inputs)?,
        ),
    ];
    if inputs.len() <= MAX_ORACLE_LEN {
        let y = reference_diagonal_output(&inputs.q, &inputs.k, &inputs.v, decays)?;
        outputs.push(("oracle".to_string(), y));
    }
    Ok(outputs)
}
