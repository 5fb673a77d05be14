//! On-disk fixtures: one CSV per matrix plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lion_core::projections::{project, seeded_fixture, DecayFamily};
use lion_core::{DecaySpec, Matrix, MixerInputs, Vector, ZooConfig};
use serde::{Deserialize, Serialize};

use crate::{parse_config, resolve_seed, GenArgs};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    None,
    Fixed,
    Selective,
    Diagonal,
}

impl From<DecayFamily> for DecayKind {
    fn from(f: DecayFamily) -> Self {
        match f {
            DecayFamily::None => DecayKind::None,
            DecayFamily::Fixed => DecayKind::Fixed,
            DecayFamily::Selective => DecayKind::Selective,
            DecayFamily::Diagonal => DecayKind::Diagonal,
        }
    }
}

/// `files` holds the generating data (tokens and weights); `derived` holds
/// the projected mixer inputs that `check` runs on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: String,
    pub seed: u64,
    pub length: usize,
    pub dim: usize,
    pub decay: DecayKind,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_fixed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bi: Option<f64>,
    pub files: BTreeMap<String, String>,
    pub derived: BTreeMap<String, String>,
}

pub struct Fixture {
    pub config: ZooConfig,
    pub inputs: MixerInputs,
}

fn write_csv(
    dir: &Path,
    name: &str,
    m: &Matrix,
    index: &mut BTreeMap<String, String>,
) -> Result<()> {
    let file = format!("{name}.csv");
    let path = dir.join(&file);
    fs::write(&path, m.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    index.insert(name.to_string(), file);
    Ok(())
}

/// Per-token decay column (or `L x d` for the diagonal family).
fn decay_matrix(decay: &DecaySpec, len: usize) -> Result<Option<Matrix>> {
    Ok(match decay {
        DecaySpec::NoDecay => None,
        DecaySpec::SelectiveDiagonal(d) => Some(d.clone()),
        scalar => Some(scalar.scalar_decays(len)?.to_column()),
    })
}

pub fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = parse_config(&args.config)?;
    ensure!(args.length >= 1, "--length must be at least 1");
    ensure!(args.dim >= 1, "--dim must be at least 1");
    let seed = resolve_seed(args.seed)?;
    let (x, w) = seeded_fixture(seed, args.length, args.dim, &cfg);
    let inputs = project(&x, &w, &cfg)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut files = BTreeMap::new();
    write_csv(&args.out, "x", &x, &mut files)?;
    write_csv(&args.out, "wq", &w.wq, &mut files)?;
    write_csv(&args.out, "wk", &w.wk, &mut files)?;
    write_csv(&args.out, "wv", &w.wv, &mut files)?;
    if let Some(wa) = &w.wa {
        write_csv(&args.out, "wa", wa, &mut files)?;
    }
    if let Some(wi) = &w.wi {
        write_csv(&args.out, "wi", wi, &mut files)?;
    }
    let mut derived = BTreeMap::new();
    write_csv(&args.out, "q", &inputs.q, &mut derived)?;
    write_csv(&args.out, "k", &inputs.k, &mut derived)?;
    write_csv(&args.out, "v", &inputs.v, &mut derived)?;
    if let Some(lambda) = decay_matrix(&inputs.decay, inputs.len())? {
        write_csv(&args.out, "lambda", &lambda, &mut derived)?;
    }

    let manifest = Manifest {
        config: cfg.name().to_string(),
        seed,
        length: args.length,
        dim: args.dim,
        decay: cfg.decay.into(),
        b: w.b,
        a_fixed: w.a_fixed,
        bi: w.wi.as_ref().map(|_| w.bi),
        files,
        derived,
    };
    let path = args.out.join(MANIFEST);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    eprintln!(
        "wrote {} files to {}",
        manifest.files.len() + manifest.derived.len() + 1,
        args.out.display()
    );
    Ok(())
}

fn read_csv(dir: &Path, file: &str) -> Result<Matrix> {
    let path: PathBuf = dir.join(file);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Matrix::from_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

fn expect_shape(name: &str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    ensure!(
        m.shape() == shape,
        "{name} is {}x{}, expected {}x{}",
        m.rows(),
        m.cols(),
        shape.0,
        shape.1
    );
    Ok(())
}

/// Loads a fixture, parsing every CSV it lists. The mixer inputs come from
/// the derived files so that edited fixtures are taken as given.
pub fn load(dir: &Path) -> Result<Fixture> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let config = parse_config(&manifest.config)?;
    let (len, d) = (manifest.length, manifest.dim);

    for (name, file) in &manifest.files {
        let m = read_csv(dir, file)?;
        let cols = m.cols();
        let expected = match name.as_str() {
            "x" => (len, d),
            "wa" | "wi" => (d, cols),
            _ => (d, d),
        };
        expect_shape(name, &m, expected)?;
    }
    let derived = |name: &str| -> Result<Matrix> {
        let file = manifest
            .derived
            .get(name)
            .with_context(|| format!("manifest lists no derived {name:?}"))?;
        read_csv(dir, file)
    };
    let q = derived("q")?;
    let k = derived("k")?;
    let v = derived("v")?;
    expect_shape("q", &q, (len, d))?;
    expect_shape("k", &k, (len, d))?;
    expect_shape("v", &v, (len, d))?;

    let decay = match manifest.decay {
        DecayKind::None => DecaySpec::NoDecay,
        kind => {
            let lambda = derived("lambda")?;
            let cols = if kind == DecayKind::Diagonal { d } else { 1 };
            expect_shape("lambda", &lambda, (len, cols))?;
            match kind {
                DecayKind::Diagonal => DecaySpec::SelectiveDiagonal(lambda),
                DecayKind::Fixed => {
                    let first = lambda.get(0, 0);
                    if lambda.as_slice().iter().any(|&l| l != first) {
                        bail!("lambda.csv is not constant but the manifest declares fixed decay");
                    }
                    DecaySpec::FixedScalar(first)
                }
                _ => DecaySpec::SelectiveScalar(Vector::new(lambda.into_vec())?),
            }
        }
    };
    let inputs = MixerInputs::new(q, k, v, decay)?;
    Ok(Fixture { config, inputs })
}
