//! A functaset bundles the modulation vectors fitted to a dataset together
//! with per-dimension normalization statistics, labels and the identity of
//! the shared base network that produced them. Stored as an archive whose
//! payload holds only the modulation matrix in little-endian f32.

use ndarray::{Array2, Axis};

use crate::codec::{fmt_f64, Archive, ArrayData};
use crate::error::{FunctaError, Result};
use crate::inr::SirenConfig;

/// Per-dimension normalization: x -> (x - mean) / (std * norm_factor).
/// Dimensions whose training std was zero store std = 1 and are flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
    pub zero_std_dims: Vec<usize>,
    pub norm_factor: f64,
}

impl NormStats {
    /// Statistics of a (N, d) modulation matrix (population std).
    pub fn from_modulations(mods: &Array2<f64>, norm_factor: f64) -> Result<Self> {
        if mods.nrows() == 0 {
            return Err(FunctaError::Contract(
                "cannot compute stats of an empty modulation set".into(),
            ));
        }
        if norm_factor <= 0.0 {
            return Err(FunctaError::Config("norm_factor must be positive".into()));
        }
        let n = mods.nrows() as f64;
        let mean = mods.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let centered = mods - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let mut std = var.mapv(f64::sqrt);
        let mut zero_std_dims = Vec::new();
        for (i, s) in std.iter_mut().enumerate() {
            if *s == 0.0 {
                *s = 1.0;
                zero_std_dims.push(i);
            }
        }
        Ok(NormStats {
            mean,
            std,
            zero_std_dims,
            norm_factor,
        })
    }

    fn check_dim(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.mean.ncols() {
            return Err(FunctaError::Shape(format!(
                "expected {} columns, got {}",
                self.mean.ncols(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        Ok((x - &self.mean) / (&self.std * self.norm_factor))
    }

    pub fn denormalize(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(z)?;
        Ok(z * &(&self.std * self.norm_factor) + &self.mean)
    }
}

/// Fitted modulation vectors for one dataset split.
#[derive(Clone, Debug)]
pub struct Functaset {
    /// (N, latent_dim) modulations, in dataset order.
    pub modulations: Array2<f64>,
    /// One class label per row.
    pub labels: Vec<u32>,
    /// Split tag, e.g. "train" or "test".
    pub split: String,
    /// Configuration of the producing base network.
    pub siren: SirenConfig,
    pub latent_dim: usize,
    /// Digest identifying the exact base parameters.
    pub params_digest: String,
    /// Normalization statistics, computed from the training split.
    pub stats: NormStats,
}

impl Functaset {
    pub fn new(
        modulations: Array2<f64>,
        labels: Vec<u32>,
        split: impl Into<String>,
        siren: SirenConfig,
        params_digest: impl Into<String>,
        stats: NormStats,
    ) -> Result<Self> {
        if modulations.nrows() != labels.len() {
            return Err(FunctaError::Contract(format!(
                "{} modulation rows but {} labels",
                modulations.nrows(),
                labels.len()
            )));
        }
        if stats.mean.ncols() != modulations.ncols() {
            return Err(FunctaError::Shape(
                "stats dimension does not match modulations".into(),
            ));
        }
        Ok(Functaset {
            latent_dim: modulations.ncols(),
            modulations,
            labels,
            split: split.into(),
            siren,
            params_digest: params_digest.into(),
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.modulations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All modulations mapped into normalized space.
    pub fn normalized(&self) -> Array2<f64> {
        self.stats.normalize(&self.modulations).unwrap()
    }

    fn float_list(a: &Array2<f64>) -> String {
        a.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
    }

    fn parse_float_list(s: &str, dim: usize, what: &str) -> Result<Array2<f64>> {
        let vals: std::result::Result<Vec<f64>, _> =
            s.split(',').map(|t| t.parse::<f64>()).collect();
        let vals =
            vals.map_err(|_| FunctaError::Format(format!("unparseable {what} list")))?;
        if vals.len() != dim {
            return Err(FunctaError::Format(format!(
                "{what} list has {} entries, expected {dim}",
                vals.len()
            )));
        }
        Ok(Array2::from_shape_vec((1, dim), vals).unwrap())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("functaset");
        a.set_meta("latent_dim", self.latent_dim.to_string());
        a.set_meta("count", self.len().to_string());
        a.set_meta("split", &self.split);
        a.set_meta("params_digest", &self.params_digest);
        a.set_meta("siren.in_dim", self.siren.in_dim.to_string());
        a.set_meta("siren.out_dim", self.siren.out_dim.to_string());
        a.set_meta("siren.width", self.siren.width.to_string());
        a.set_meta("siren.depth", self.siren.depth.to_string());
        a.set_meta("siren.omega0", fmt_f64(self.siren.omega0));
        a.set_meta("norm_factor", fmt_f64(self.stats.norm_factor));
        a.set_meta("mean", Self::float_list(&self.stats.mean));
        a.set_meta("std", Self::float_list(&self.stats.std));
        a.set_meta(
            "zero_std_dims",
            self.stats
                .zero_std_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        a.set_meta(
            "labels",
            self.labels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        a.push_array(
            "modulations",
            ArrayData::F32(self.modulations.mapv(|v| v as f32)),
        );
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != "functaset" {
            return Err(FunctaError::Format(format!(
                "expected a functaset archive, found kind '{}'",
                a.kind
            )));
        }
        let latent_dim: usize = a.meta_parsed("latent_dim")?;
        let count: usize = a.meta_parsed("count")?;
        let siren = SirenConfig {
            in_dim: a.meta_parsed("siren.in_dim")?,
            out_dim: a.meta_parsed("siren.out_dim")?,
            width: a.meta_parsed("siren.width")?,
            depth: a.meta_parsed("siren.depth")?,
            omega0: a.meta_parsed("siren.omega0")?,
        };
        let mean = Self::parse_float_list(
            a.get_meta("mean")
                .ok_or_else(|| FunctaError::Format("missing mean".into()))?,
            latent_dim,
            "mean",
        )?;
        let std = Self::parse_float_list(
            a.get_meta("std")
                .ok_or_else(|| FunctaError::Format("missing std".into()))?,
            latent_dim,
            "std",
        )?;
        let zero_std_dims = match a.get_meta("zero_std_dims") {
            Some("") | None => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| FunctaError::Format("unparseable zero_std_dims".into()))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let labels = match a.get_meta("labels") {
            Some("") | None => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| FunctaError::Format("unparseable label".into()))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let modulations = a.array_f64("modulations")?;
        if modulations.dim() != (count, latent_dim) {
            return Err(FunctaError::Format(format!(
                "modulation shape {:?} does not match header ({count}, {latent_dim})",
                modulations.dim()
            )));
        }
        let stats = NormStats {
            mean,
            std,
            zero_std_dims,
            norm_factor: a.meta_parsed("norm_factor")?,
        };
        Functaset::new(
            modulations,
            labels,
            a.get_meta("split").unwrap_or("train"),
            siren,
            a.get_meta("params_digest").unwrap_or_default(),
            stats,
        )
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
