//! Versioned, checksummed text format for a trained model.
//!
//! Every `f64` is stored as the 16-digit hex of its bit pattern, so a save and
//! load round trip is bit-exact. The last line is `checksum <sha256>` over all
//! preceding bytes.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AutoencoderNet, DenseLayer, SoftmaxHead};
use crate::dataset::{StandardizationStats, FEATURE_COUNT};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "gbrbm-model";

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleMetadata {
    pub seed: u64,
    /// Hash of the run configuration that produced the model.
    pub config_hash: String,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
}

/// Everything needed to turn raw features into an RSS prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub net: AutoencoderNet,
    pub head: SoftmaxHead,
    pub stats: StandardizationStats,
    pub metadata: BundleMetadata,
}

fn push_floats<'a>(out: &mut String, label: &str, values: impl ExactSizeIterator<Item = &'a f64>) {
    let _ = write!(out, "{label} {}", values.len());
    for v in values {
        let _ = write!(out, " {:016x}", v.to_bits());
    }
    out.push('\n');
}

fn push_layer(out: &mut String, label: &str, layer: &DenseLayer) {
    let _ = writeln!(out, "{label} {} {}", layer.n_in(), layer.n_out());
    push_floats(out, "weights", layer.weights.iter());
    push_floats(out, "bias", layer.bias.iter());
}

fn checksum(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

impl ModelBundle {
    pub fn layer_dims(&self) -> Vec<usize> {
        self.net.layer_dims()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidParameter(m));
        if self.net.input_dim() != FEATURE_COUNT {
            return fail(format!(
                "network input width {} is not {FEATURE_COUNT}",
                self.net.input_dim()
            ));
        }
        if self.head.weights.nrows() != self.net.code_dim() {
            return fail("head width does not match the code layer".into());
        }
        if self.stats.mean.len() != FEATURE_COUNT || self.stats.stdev.len() != FEATURE_COUNT {
            return fail("standardization statistics have the wrong width".into());
        }
        self.head.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "version {FORMAT_VERSION}");
        let dims: Vec<String> = self.layer_dims().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "layer_dims {}", dims.join(" "));
        let m = &self.metadata;
        let _ = writeln!(out, "seed {}", m.seed);
        let _ = writeln!(out, "config_sha256 {}", m.config_hash);
        let _ = writeln!(out, "pretrain_epochs {}", m.pretrain_epochs);
        let _ = writeln!(out, "train_epochs {}", m.train_epochs);
        push_floats(&mut out, "std_mean", self.stats.mean.iter());
        push_floats(&mut out, "std_stdev", self.stats.stdev.iter());
        push_floats(&mut out, "sigma", self.net.sigma.iter());
        for layer in &self.net.encoder {
            push_layer(&mut out, "encoder", layer);
        }
        for layer in &self.net.decoder {
            push_layer(&mut out, "decoder", layer);
        }
        let _ = writeln!(
            out,
            "head {} {}",
            self.head.weights.nrows(),
            self.head.weights.ncols()
        );
        push_floats(&mut out, "weights", self.head.weights.iter());
        push_floats(&mut out, "bias", self.head.bias.iter());
        push_floats(&mut out, "bin_centers", self.head.bin_centers.iter());
        let sum = checksum(&out);
        let _ = writeln!(out, "checksum {sum}");
        out
    }

    /// Parses a bundle. The version is checked before the checksum.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checksum("not a model file".into()));
        }
        let version_line = lines.next().unwrap_or("");
        let found = version_line
            .strip_prefix("version ")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Checksum("missing version line".into()))?;
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                found,
                supported: FORMAT_VERSION,
            });
        }

        let trimmed = text.strip_suffix('\n').unwrap_or(text);
        let (body, last) = match trimmed.rfind('\n') {
            Some(i) => (&text[..=i], &trimmed[i + 1..]),
            None => return Err(Error::Checksum("file is truncated".into())),
        };
        let stored = last
            .strip_prefix("checksum ")
            .ok_or_else(|| Error::Checksum("missing checksum line (file truncated?)".into()))?;
        let actual = checksum(body);
        if stored.trim() != actual {
            return Err(Error::Checksum(format!(
                "stored {stored}, computed {actual}"
            )));
        }

        let mut r = Reader {
            lines: body.lines().skip(2),
        };
        let dims = r.usizes("layer_dims")?;
        let metadata = BundleMetadata {
            seed: r.scalar("seed")?,
            config_hash: r.scalar("config_sha256")?,
            pretrain_epochs: r.scalar("pretrain_epochs")?,
            train_epochs: r.scalar("train_epochs")?,
        };
        let stats = StandardizationStats {
            mean: Array1::from(r.floats("std_mean")?),
            stdev: Array1::from(r.floats("std_stdev")?),
        };
        let sigma = Array1::from(r.floats("sigma")?);
        let depth = dims.len().saturating_sub(1) / 2;
        let encoder = (0..depth)
            .map(|_| r.layer("encoder"))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..depth)
            .map(|_| r.layer("decoder"))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = r.shape("head")?;
        let head = SoftmaxHead {
            weights: r.matrix(rows, cols)?,
            bias: Array1::from(r.floats("bias")?),
            bin_centers: Array1::from(r.floats("bin_centers")?),
        };
        let bundle = Self {
            net: AutoencoderNet {
                encoder,
                decoder,
                sigma,
            },
            head,
            stats,
            metadata,
        };
        if bundle.layer_dims() != dims {
            return Err(Error::InvalidParameter(
                "layer_dims disagree with the stored layers".into(),
            ));
        }
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

struct Reader<'a, I: Iterator<Item = &'a str>> {
    lines: I,
}

fn malformed(what: &str) -> Error {
    Error::InvalidParameter(format!("malformed model file near `{what}`"))
}

impl<'a, I: Iterator<Item = &'a str>> Reader<'a, I> {
    fn fields(&mut self, label: &str) -> Result<Vec<&'a str>> {
        let line = self.lines.next().ok_or_else(|| malformed(label))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(label) {
            return Err(malformed(label));
        }
        Ok(parts.collect())
    }

    fn scalar<T: std::str::FromStr>(&mut self, label: &str) -> Result<T> {
        match self.fields(label)?.as_slice() {
            [v] => v.parse().map_err(|_| malformed(label)),
            _ => Err(malformed(label)),
        }
    }

    fn usizes(&mut self, label: &str) -> Result<Vec<usize>> {
        self.fields(label)?
            .iter()
            .map(|v| v.parse().map_err(|_| malformed(label)))
            .collect()
    }

    fn shape(&mut self, label: &str) -> Result<(usize, usize)> {
        match self.usizes(label)?.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(malformed(label)),
        }
    }

    fn floats(&mut self, label: &str) -> Result<Vec<f64>> {
        let fields = self.fields(label)?;
        let (count, values) = fields.split_first().ok_or_else(|| malformed(label))?;
        let count: usize = count.parse().map_err(|_| malformed(label))?;
        if values.len() != count {
            return Err(malformed(label));
        }
        values
            .iter()
            .map(|v| {
                u64::from_str_radix(v, 16)
                    .ok()
                    .filter(|_| v.len() == 16)
                    .map(f64::from_bits)
                    .ok_or_else(|| malformed(label))
            })
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        Array2::from_shape_vec((rows, cols), self.floats("weights")?)
            .map_err(|_| malformed("weights"))
    }

    fn layer(&mut self, label: &str) -> Result<DenseLayer> {
        let (n_in, n_out) = self.shape(label)?;
        let weights = self.matrix(n_in, n_out)?;
        let bias = Array1::from(self.floats("bias")?);
        if bias.len() != n_out {
            return Err(malformed("bias"));
        }
        Ok(DenseLayer { weights, bias })
    }
}
