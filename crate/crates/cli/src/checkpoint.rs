//! Checkpoint files: `u64` little-endian manifest length, the JSON
//! manifest, then every array as contiguous little-endian `f64`s in
//! manifest order.

use std::fs;
use std::path::Path;

use ktied_core::model::{LayerPosterior, MlpArchitecture, PosteriorFamily, VariationalMlp};
use ktied_core::variational::{KTiedLayerPosterior, MeanFieldLayerPosterior};
use ktied_core::DenseMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{FamilyName, PriorConfig};
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: Vec<usize>,
    pub family: FamilyName,
    pub k: Option<usize>,
    pub prior: PriorConfig,
    pub seed: u64,
    pub step_count: u64,
    /// Training-set size, the KL normaliser for the ELBO.
    pub dataset_size: usize,
    pub compressed_rank: Option<usize>,
    pub arrays: Vec<ArrayDescriptor>,
}

/// A model plus the run facts needed to evaluate it later.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VariationalMlp,
    pub prior: PriorConfig,
    pub seed: u64,
    pub step_count: u64,
    pub dataset_size: usize,
    pub compressed_rank: Option<usize>,
}

fn family_fields(family: PosteriorFamily) -> (FamilyName, Option<usize>) {
    match family {
        PosteriorFamily::MeanField => (FamilyName::Meanfield, None),
        PosteriorFamily::KTied { k } => (FamilyName::Ktied, Some(k)),
    }
}

/// Array names and shapes a layer of the given family stores, in order.
fn layer_layout(l: usize, (m, n): (usize, usize), family: PosteriorFamily) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![(format!("layer{l}.kernel_mean"), vec![m, n])];
    match family {
        PosteriorFamily::MeanField => out.push((format!("layer{l}.kernel_log_sigma"), vec![m, n])),
        PosteriorFamily::KTied { k } => {
            out.push((format!("layer{l}.log_u"), vec![m, k]));
            out.push((format!("layer{l}.log_v"), vec![n, k]));
        }
    }
    out.push((format!("layer{l}.bias_mean"), vec![n]));
    out.push((format!("layer{l}.bias_log_sigma"), vec![n]));
    out
}

impl Checkpoint {
    pub fn family(&self) -> PosteriorFamily {
        self.model.layers()[0].family()
    }

    pub fn manifest(&self) -> Manifest {
        let arch = self.model.architecture();
        let family = self.family();
        let mut arrays = Vec::new();
        let mut offset = 0;
        for l in 0..arch.num_layers() {
            for (name, shape) in layer_layout(l, arch.layer_shape(l), family) {
                let length = shape.iter().product::<usize>() * 8;
                arrays.push(ArrayDescriptor {
                    name,
                    shape,
                    offset,
                    length,
                });
                offset += length;
            }
        }
        let (family, k) = family_fields(family);
        Manifest {
            format_version: FORMAT_VERSION,
            architecture: arch.widths().to_vec(),
            family,
            k,
            prior: self.prior,
            seed: self.seed,
            step_count: self.step_count,
            dataset_size: self.dataset_size,
            compressed_rank: self.compressed_rank,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = (manifest.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&manifest);
        for layer in self.model.layers() {
            for (_, values) in layer.named_arrays() {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let head: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CliError::format("checkpoint shorter than its length prefix"))?;
        let manifest_len = usize::try_from(u64::from_le_bytes(head))
            .ok()
            .filter(|&n| n <= bytes.len() - 8)
            .ok_or_else(|| CliError::format("manifest length exceeds file size"))?;
        let manifest_bytes = &bytes[8..8 + manifest_len];
        let payload = &bytes[8 + manifest_len..];

        let version: serde_json::Value = serde_json::from_slice(manifest_bytes)
            .map_err(|e| CliError::format(format!("manifest is not JSON: {e}")))?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::format(format!(
                    "unsupported format version {v}, expected {FORMAT_VERSION}"
                )))
            }
            None => return Err(CliError::format("manifest lacks format_version")),
        }
        let m: Manifest =
            serde_json::from_value(version).map_err(|e| CliError::format(format!("bad manifest: {e}")))?;
        Self::from_manifest(m, payload)
    }

    fn from_manifest(m: Manifest, payload: &[u8]) -> CliResult<Self> {
        let bad = |msg: String| CliError::format(msg);
        let arch = MlpArchitecture::new(m.architecture.clone()).map_err(|e| bad(e.to_string()))?;
        let family = match (m.family, m.k) {
            (FamilyName::Meanfield, None) => PosteriorFamily::MeanField,
            (FamilyName::Ktied, Some(k)) if k > 0 => PosteriorFamily::KTied { k },
            (f, k) => return Err(bad(format!("family {f:?} inconsistent with k = {k:?}"))),
        };

        let expected: Vec<_> = (0..arch.num_layers())
            .flat_map(|l| layer_layout(l, arch.layer_shape(l), family))
            .collect();
        if expected.len() != m.arrays.len() {
            return Err(bad(format!(
                "manifest lists {} arrays, architecture needs {}",
                m.arrays.len(),
                expected.len()
            )));
        }
        let mut offset = 0;
        let mut arrays = Vec::with_capacity(expected.len());
        for (d, (name, shape)) in m.arrays.iter().zip(&expected) {
            if &d.name != name || &d.shape != shape {
                return Err(bad(format!("array {} {:?} where {name} {shape:?} expected", d.name, d.shape)));
            }
            if d.offset != offset || d.length != shape.iter().product::<usize>() * 8 {
                return Err(bad(format!("array {name} does not tile the payload")));
            }
            let chunk = payload
                .get(offset..offset + d.length)
                .ok_or_else(|| bad(format!("payload ends inside array {name}")))?;
            arrays.push(
                chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect::<Vec<_>>(),
            );
            offset += d.length;
        }
        if offset != payload.len() {
            return Err(bad(format!(
                "payload has {} bytes, manifest covers {offset}",
                payload.len()
            )));
        }

        let mut arrays = arrays.into_iter();
        let mut next = |rows: usize, cols: usize| -> DenseMatrix {
            DenseMatrix::from_vec(rows, cols, arrays.next().expect("counted above")).expect("shape checked")
        };
        let mut layers = Vec::with_capacity(arch.num_layers());
        let mut priors = Vec::with_capacity(arch.num_layers());
        for l in 0..arch.num_layers() {
            let (fan_in, fan_out) = arch.layer_shape(l);
            priors.push(m.prior.to_spec().for_layer(fan_in).map_err(|e| bad(e.to_string()))?);
            let kernel_mean = next(fan_in, fan_out);
            layers.push(match family {
                PosteriorFamily::MeanField => {
                    let kernel_log_sigma = next(fan_in, fan_out);
                    LayerPosterior::MeanField(MeanFieldLayerPosterior {
                        kernel_mean,
                        kernel_log_sigma,
                        bias_mean: next(1, fan_out).into_vec(),
                        bias_log_sigma: next(1, fan_out).into_vec(),
                    })
                }
                PosteriorFamily::KTied { k } => {
                    let log_u = next(fan_in, k);
                    let log_v = next(fan_out, k);
                    LayerPosterior::KTied(KTiedLayerPosterior {
                        kernel_mean,
                        log_u,
                        log_v,
                        bias_mean: next(1, fan_out).into_vec(),
                        bias_log_sigma: next(1, fan_out).into_vec(),
                    })
                }
            });
        }
        let model = VariationalMlp::from_parts(arch, layers, priors).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            model,
            prior: m.prior,
            seed: m.seed,
            step_count: m.step_count,
            dataset_size: m.dataset_size,
            compressed_rank: m.compressed_rank,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| CliError::io(path, e))?)
    }
}
