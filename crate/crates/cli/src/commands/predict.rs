use std::io::Write;
use std::path::PathBuf;

use autogp::likelihoods::Prediction;
use autogp::math::{DenseMatrix, RandomStream};
use autogp::objectives::McConfig;

use super::EVAL_STREAM;
use crate::checkpoint::Checkpoint;
use crate::config::DataFormat;
use crate::error::{CliError, CliResult, Stage};

#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    /// Headered csv of raw inputs; the checkpoint's label columns are
    /// ignored when present.
    pub input: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub mc_samples: Option<usize>,
}

fn read_inputs(args: &PredictArgs, ck: &Checkpoint) -> CliResult<DenseMatrix> {
    let d = ck.model.input_dim();
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CliError::config("input", format!("{}: {e}", args.input.display())))?;
    if text.trim().is_empty() {
        return Ok(DenseMatrix::zeros(0, d));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CliError::config("input", format!("header: {e}")))?
        .clone();
    let labels: &[String] = if ck.config.dataset.format == DataFormat::Csv {
        &ck.config.dataset.label_columns
    } else {
        &[]
    };
    let features: Vec<usize> = (0..headers.len()).filter(|&i| !labels.iter().any(|l| l == &headers[i])).collect();
    if features.len() != d {
        return Err(CliError::config(
            "input.columns",
            format!("model expects {d} input columns, file has {}", features.len()),
        ));
    }
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| CliError::config("input", format!("line {line}: {e}")))?;
        for &c in &features {
            let field = record.get(c).unwrap_or("");
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::config("input", format!("line {line}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(CliError::config("input", format!("line {line}: non-finite value")));
            }
            values.push(v);
        }
    }
    let n = values.len() / d;
    DenseMatrix::from_vec(n, d, values).stage("input")
}

/// Writes one comma-separated line per input row: class probabilities for
/// classifiers, `mean,variance` pairs per output (in original target units)
/// for regression models. Returns the number of rows written.
pub fn run_predict(args: &PredictArgs) -> CliResult<usize> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let raw = read_inputs(args, &ck)?;
    let io = |e: std::io::Error| CliError::config("output", format!("{}: {e}", args.out.display()));
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(io)?);
    if raw.rows() == 0 {
        out.flush().map_err(io)?;
        return Ok(0);
    }
    let x = ck.transform.apply_inputs(&raw).stage("input")?;
    let seed = args.seed.unwrap_or(ck.config.training.seed);
    let s = args.mc_samples.unwrap_or(ck.config.training.eval_samples);
    let mc = McConfig::new(s, RandomStream::new(seed, EVAL_STREAM));
    let preds = autogp::training::predict_points(&ck.model, &x, &mc, None).stage("predict")?;
    let t = &ck.transform;
    for (pred, _) in &preds {
        let fields: Vec<String> = match pred {
            Prediction::Classes { probabilities, .. } => probabilities.iter().map(|p| p.to_string()).collect(),
            Prediction::Real { mean, variance } => mean
                .iter()
                .zip(variance)
                .enumerate()
                .flat_map(|(p, (m, v))| {
                    let scale = t.target_scales.get(p).copied().unwrap_or(1.0);
                    let shift = t.target_means.get(p).copied().unwrap_or(0.0);
                    [(m * scale + shift).to_string(), (v * scale * scale).to_string()]
                })
                .collect(),
        };
        writeln!(out, "{}", fields.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(preds.len())
}
