//! Checkpoint format: one line of JSON header, then every parameter and
//! running statistic as little-endian f64.
//!
//! Binary layout, in order: for each layer its weights
//! (`out x in x k x k x k`), biases, running means, running variances;
//! then the FC weights (flattened last-block activations, channel-major)
//! and the FC bias.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, CnnModel, Normalization, Target, TrainConfig};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: Architecture,
    pub input_dims: [usize; 3],
    pub target: Target,
    pub normalization: Normalization,
    pub bn_eps: f64,
    pub leak: f64,
    pub bn_momentum: f64,
    /// Running statistics are stored per layer after the biases.
    pub running_stats: String,
    pub seed: u64,
    pub param_count: usize,
    pub value_count: usize,
    #[serde(default)]
    pub training: Option<TrainConfig>,
}

fn value_count(model: &CnnModel) -> usize {
    model
        .layers
        .iter()
        .map(|l| l.weights.len() + 3 * l.bias.len())
        .sum::<usize>()
        + model.fc_weights.len()
        + 1
}

pub fn header_of(model: &CnnModel, training: Option<&TrainConfig>) -> CheckpointHeader {
    CheckpointHeader {
        format_version: FORMAT_VERSION,
        architecture: model.architecture(),
        input_dims: model.input_dims,
        target: model.target,
        normalization: model.normalization,
        bn_eps: model.bn_eps,
        leak: model.leak,
        bn_momentum: model.bn_momentum,
        running_stats: "per-layer mean and biased variance, momentum-averaged".into(),
        seed: model.seed,
        param_count: model.param_count(),
        value_count: value_count(model),
        training: training.cloned(),
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &CnnModel, training: Option<&TrainConfig>) -> Result<()> {
    let header = header_of(model, training);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(8 * header.value_count);
    let mut put = |vals: &[f64]| vals.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    for l in &model.layers {
        put(&l.weights);
        put(&l.bias);
        put(&l.running_mean);
        put(&l.running_var);
    }
    put(&model.fc_weights);
    put(&[model.fc_bias]);
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CnnModel, CheckpointHeader)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut model = CnnModel::zeros(&header.architecture, header.input_dims, header.target)?;
    if value_count(&model) != header.value_count || model.param_count() != header.param_count {
        return Err(Error::Format("checkpoint header counts disagree with its architecture".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.value_count {
        return Err(Error::Format(format!(
            "checkpoint holds {} bytes of values, expected {}",
            bytes.len(),
            8 * header.value_count
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = values.next().expect("counted"));
    for l in &mut model.layers {
        fill(&mut l.weights);
        fill(&mut l.bias);
        fill(&mut l.running_mean);
        fill(&mut l.running_var);
    }
    fill(&mut model.fc_weights);
    fill(std::slice::from_mut(&mut model.fc_bias));
    model.normalization = header.normalization;
    model.bn_eps = header.bn_eps;
    model.leak = header.leak;
    model.bn_momentum = header.bn_momentum;
    model.seed = header.seed;
    Ok((model, header))
}

pub fn save(path: &Path, model: &CnnModel, training: Option<&TrainConfig>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, training)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CnnModel, CheckpointHeader)> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_checkpoint(f)
}
