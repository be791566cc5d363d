//! On-disk archive format shared by model checkpoints and functasets: a
//! plain-text header describing named arrays and metadata, followed by a raw
//! little-endian binary payload whose sha-256 digest is verified on load.
//!
//! Layout:
//! ```text
//! FUNCTA-ARCHIVE 1
//! kind=<checkpoint|functaset|...>
//! meta.<key>=<value>           (any number, order preserved)
//! array=<name>:<rows>:<cols>:<f32|f64>:<byte offset>:<byte len>
//! digest=<sha256 hex of payload>
//! payload=<total payload bytes>
//!
//! <payload bytes>
//! ```
//! Float metadata written through [`fmt_f64`] round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{FunctaError, Result};

pub const MAGIC: &str = "FUNCTA-ARCHIVE";
pub const VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// sha-256 of arbitrary bytes as lowercase hex; also used to fingerprint
/// CLI input files in run manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Shortest exact decimal representation of an f64 (round-trips via parse).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Named array stored in the payload.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Array2<f64>),
    F32(Array2<f32>),
}

impl ArrayData {
    fn dims(&self) -> (usize, usize) {
        match self {
            ArrayData::F64(a) => a.dim(),
            ArrayData::F32(a) => a.dim(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::F32(_) => "f32",
        }
    }

    fn byte_len(&self) -> usize {
        let (r, c) = self.dims();
        r * c
            * match self {
                ArrayData::F64(_) => 8,
                ArrayData::F32(_) => 4,
            }
    }

    fn write_into(&self, buf: &mut Vec<u8>) {
        match self {
            ArrayData::F64(a) => {
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArrayData::F32(a) => {
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

/// In-memory archive: a kind tag, ordered string metadata, named arrays.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, ArrayData)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Archive {
            kind: kind.into(),
            meta: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.push((key.into(), value.into()));
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Metadata value parsed to T, with a Format error naming the key.
    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get_meta(key)
            .ok_or_else(|| FunctaError::Format(format!("missing metadata key '{key}'")))?;
        raw.parse()
            .map_err(|_| FunctaError::Format(format!("unparseable metadata '{key}'={raw}")))
    }

    pub fn push_array(&mut self, name: impl Into<String>, data: ArrayData) {
        self.arrays.push((name.into(), data));
    }

    pub fn array(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| FunctaError::Format(format!("missing array '{name}'")))
    }

    pub fn array_f64(&self, name: &str) -> Result<Array2<f64>> {
        match self.array(name)? {
            ArrayData::F64(a) => Ok(a.clone()),
            ArrayData::F32(a) => Ok(a.mapv(|v| v as f64)),
        }
    }

    /// Serializes header + payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.arrays.len());
        for (name, data) in &self.arrays {
            let offset = payload.len();
            data.write_into(&mut payload);
            index.push((name, data, offset));
        }
        let digest = sha256_hex(&payload);
        let mut header = String::new();
        let _ = writeln!(header, "{MAGIC} {VERSION}");
        let _ = writeln!(header, "kind={}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(header, "meta.{k}={v}");
        }
        for (name, data, offset) in index {
            let (r, c) = data.dims();
            let _ = writeln!(
                header,
                "array={name}:{r}:{c}:{}:{offset}:{}",
                data.dtype(),
                data.byte_len()
            );
        }
        let _ = writeln!(header, "digest={digest}");
        let _ = writeln!(header, "payload={}", payload.len());
        let _ = writeln!(header);
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and verifies an archive. Distinguishes unsupported version,
    /// digest mismatch, and truncation as separate error variants.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // header is the text up to the first blank line
        let header_end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| FunctaError::Format("no header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| FunctaError::Format("header is not utf-8".into()))?;
        let payload = &bytes[header_end + 2..];

        let mut lines = header.lines();
        let first = lines
            .next()
            .ok_or_else(|| FunctaError::Format("empty header".into()))?;
        let mut parts = first.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(FunctaError::Format("bad magic".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FunctaError::Format("missing version".into()))?;
        if version != VERSION {
            return Err(FunctaError::Version {
                found: version,
                expected: VERSION,
            });
        }

        let mut archive = Archive::default();
        let mut specs = Vec::new();
        let mut digest_hex = None;
        let mut payload_len = None;
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FunctaError::Format(format!("bad header line '{line}'")))?;
            match key {
                "kind" => archive.kind = value.to_string(),
                "digest" => digest_hex = Some(value.to_string()),
                "payload" => {
                    payload_len = Some(value.parse::<usize>().map_err(|_| {
                        FunctaError::Format("unparseable payload length".into())
                    })?)
                }
                "array" => specs.push(parse_array_spec(value)?),
                _ => {
                    if let Some(mk) = key.strip_prefix("meta.") {
                        archive.meta.push((mk.to_string(), value.to_string()));
                    } else {
                        return Err(FunctaError::Format(format!("unknown header key '{key}'")));
                    }
                }
            }
        }
        let expected_len =
            payload_len.ok_or_else(|| FunctaError::Format("missing payload length".into()))?;
        if payload.len() < expected_len {
            return Err(FunctaError::Format(format!(
                "truncated payload: {} of {expected_len} bytes",
                payload.len()
            )));
        }
        let payload = &payload[..expected_len];
        let digest_hex =
            digest_hex.ok_or_else(|| FunctaError::Format("missing digest".into()))?;
        let actual = sha256_hex(payload);
        if actual != digest_hex {
            return Err(FunctaError::Digest {
                found: actual,
                expected: digest_hex,
            });
        }

        for (name, rows, cols, dtype, offset, len) in specs {
            let end = offset
                .checked_add(len)
                .filter(|e| *e <= payload.len())
                .ok_or_else(|| {
                    FunctaError::Format(format!("array '{name}' extends past payload"))
                })?;
            let raw = &payload[offset..end];
            let data = match dtype.as_str() {
                "f64" => {
                    if len != rows * cols * 8 {
                        return Err(FunctaError::Format(format!("array '{name}' length mismatch")));
                    }
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ArrayData::F64(Array2::from_shape_vec((rows, cols), v).unwrap())
                }
                "f32" => {
                    if len != rows * cols * 4 {
                        return Err(FunctaError::Format(format!("array '{name}' length mismatch")));
                    }
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ArrayData::F32(Array2::from_shape_vec((rows, cols), v).unwrap())
                }
                other => {
                    return Err(FunctaError::Format(format!("unknown dtype '{other}'")));
                }
            };
            archive.arrays.push((name, data));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(FunctaError::from)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Digest of all array payload bytes, usable as a model-identity tag.
    pub fn payload_digest(&self) -> String {
        let mut payload = Vec::new();
        for (_, data) in &self.arrays {
            data.write_into(&mut payload);
        }
        sha256_hex(&payload)
    }
}

fn parse_array_spec(value: &str) -> Result<(String, usize, usize, String, usize, usize)> {
    let parts: Vec<&str> = value.split(':').collect();
    if parts.len() != 6 {
        return Err(FunctaError::Format(format!("bad array spec '{value}'")));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| FunctaError::Format(format!("bad array spec '{value}'")))
    };
    Ok((
        parts[0].to_string(),
        parse(parts[1])?,
        parse(parts[2])?,
        parts[3].to_string(),
        parse(parts[4])?,
        parse(parts[5])?,
    ))
}

/// Stores every tensor of a parameter set as `<prefix><name>`, in order.
pub fn push_params(archive: &mut Archive, prefix: &str, params: &crate::opt::ParamSet) {
    for (name, value) in params.iter() {
        archive.push_array(format!("{prefix}{name}"), ArrayData::F64(value.clone()));
    }
}

/// Rebuilds a parameter set from arrays with the given prefix, preserving
/// archive order.
pub fn read_params(archive: &Archive, prefix: &str) -> Result<crate::opt::ParamSet> {
    let mut params = crate::opt::ParamSet::new();
    for (name, data) in &archive.arrays {
        if let Some(stripped) = name.strip_prefix(prefix) {
            match data {
                ArrayData::F64(a) => params.push(stripped, a.clone()),
                ArrayData::F32(a) => params.push(stripped, a.mapv(|v| v as f64)),
            }
        }
    }
    if params.len() == 0 {
        return Err(FunctaError::Format(format!(
            "no arrays with prefix '{prefix}'"
        )));
    }
    Ok(params)
}

/// Digest of a parameter set's raw f64 bytes, in parameter order.
pub fn params_digest(params: &crate::opt::ParamSet) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in params.iter() {
        hasher.update(name.as_bytes());
        for v in value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Archive {
        let mut a = Archive::new("checkpoint");
        a.set_meta("latent_dim", "3");
        a.set_meta("lr", fmt_f64(0.1 + 0.2));
        a.push_array("w", ArrayData::F64(array![[1.0, -2.5], [3.25, 0.0]]));
        a.push_array("m", ArrayData::F32(array![[0.5f32, 1.5, 2.5]]));
        a
    }

    #[test]
    fn roundtrip_exact() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.kind, "checkpoint");
        assert_eq!(b.get_meta("latent_dim"), Some("3"));
        assert_eq!(b.arrays, a.arrays);
        // float metadata round-trips exactly
        let lr: f64 = b.meta_parsed("lr").unwrap();
        assert_eq!(lr, 0.1 + 0.2);
    }

    #[test]
    fn float_formatting_roundtrips_awkward_values() {
        for v in [
            0.1,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            1e300,
            -0.0,
            2.0f64.powi(-52),
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let hacked = text.replacen("FUNCTA-ARCHIVE 1", "FUNCTA-ARCHIVE 9", 1);
        match Archive::from_bytes(hacked.as_bytes()) {
            Err(FunctaError::Version { found: 9, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_is_digest_error() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        match Archive::from_bytes(&bytes) {
            Err(FunctaError::Digest { .. }) => {}
            other => panic!("expected digest error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_format_error() {
        let bytes = sample().to_bytes();
        match Archive::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(FunctaError::Format(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn save_load_file() {
        let dir = std::env::temp_dir().join("functa-codec-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.bin");
        let a = sample();
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(a.arrays, b.arrays);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn params_digest_sensitive_to_values_and_names() {
        let mut p1 = crate::opt::ParamSet::new();
        p1.push("w", array![[1.0, 2.0]]);
        let mut p2 = crate::opt::ParamSet::new();
        p2.push("w", array![[1.0, 2.0000001]]);
        let mut p3 = crate::opt::ParamSet::new();
        p3.push("v", array![[1.0, 2.0]]);
        let d1 = params_digest(&p1);
        assert_ne!(d1, params_digest(&p2));
        assert_ne!(d1, params_digest(&p3));
        assert_eq!(d1, params_digest(&p1.clone()));
    }
}

/// Serialization of the trainable models as archives, shared by the CLI.
pub mod checkpoints {
    use super::*;
    use crate::classify::{Classifier, ClassifierConfig};
    use crate::ddpm::{EpsNet, EpsNetConfig};
    use crate::flow::{FlowConfig, FlowModel};
    use crate::inr::{LatentModulatedSiren, SirenConfig};
    use crate::meta::{InnerLoopConfig, MetaState};

    fn siren_meta(a: &mut Archive, c: &SirenConfig) {
        a.set_meta("siren.in_dim", c.in_dim.to_string());
        a.set_meta("siren.out_dim", c.out_dim.to_string());
        a.set_meta("siren.width", c.width.to_string());
        a.set_meta("siren.depth", c.depth.to_string());
        a.set_meta("siren.omega0", fmt_f64(c.omega0));
    }

    fn siren_from_meta(a: &Archive) -> Result<SirenConfig> {
        Ok(SirenConfig {
            in_dim: a.meta_parsed("siren.in_dim")?,
            out_dim: a.meta_parsed("siren.out_dim")?,
            width: a.meta_parsed("siren.width")?,
            depth: a.meta_parsed("siren.depth")?,
            omega0: a.meta_parsed("siren.omega0")?,
        })
    }

    fn expect_kind(a: &Archive, kind: &str) -> Result<()> {
        if a.kind != kind {
            return Err(FunctaError::Format(format!(
                "expected a {kind} archive, found kind '{}'",
                a.kind
            )));
        }
        Ok(())
    }

    pub fn save_meta_state(state: &MetaState) -> Archive {
        let mut a = Archive::new("meta-checkpoint");
        siren_meta(&mut a, &state.model.config);
        a.set_meta("latent_dim", state.model.latent_dim.to_string());
        a.set_meta("n_inner", state.inner_cfg.n_inner.to_string());
        a.set_meta("fixed_lr", fmt_f64(state.inner_cfg.fixed_lr));
        a.set_meta("use_meta_sgd", state.inner_cfg.use_meta_sgd.to_string());
        a.set_meta("outer_lr", fmt_f64(state.outer_lr));
        a.set_meta("iter", state.iter.to_string());
        push_params(&mut a, "model.", &state.model.params);
        a.push_array("inner_lrs", ArrayData::F64(state.inner_lrs.clone()));
        a
    }

    pub fn load_meta_state(a: &Archive) -> Result<MetaState> {
        expect_kind(a, "meta-checkpoint")?;
        let config = siren_from_meta(a)?;
        let latent_dim: usize = a.meta_parsed("latent_dim")?;
        let inner_cfg = InnerLoopConfig {
            n_inner: a.meta_parsed("n_inner")?,
            fixed_lr: a.meta_parsed("fixed_lr")?,
            use_meta_sgd: a.meta_parsed("use_meta_sgd")?,
        };
        let mut model = LatentModulatedSiren::init(config, latent_dim, 0)?;
        let params = read_params(a, "model.")?;
        for (name, v) in model.params.iter_mut() {
            let loaded = params
                .get(name)
                .ok_or_else(|| FunctaError::Format(format!("missing parameter '{name}'")))?;
            if loaded.dim() != v.dim() {
                return Err(FunctaError::Shape(format!("parameter '{name}' shape mismatch")));
            }
            v.assign(loaded);
        }
        let inner_lrs = a.array_f64("inner_lrs")?;
        let outer_lr: f64 = a.meta_parsed("outer_lr")?;
        let mut state = MetaState::new(model, inner_cfg, outer_lr, 0);
        state.inner_lrs = inner_lrs;
        state.iter = a.meta_parsed("iter")?;
        Ok(state)
    }

    pub fn save_flow(model: &FlowModel) -> Archive {
        let mut a = Archive::new("flow-checkpoint");
        let c = &model.config;
        a.set_meta("dim", c.dim.to_string());
        a.set_meta("n_layers", c.n_layers.to_string());
        a.set_meta("n_bins", c.n_bins.to_string());
        a.set_meta("tail_bound", fmt_f64(c.tail_bound));
        a.set_meta("hidden", c.hidden.to_string());
        a.set_meta("n_classes", c.n_classes.to_string());
        a.set_meta("embed_dim", c.embed_dim.to_string());
        a.set_meta("base_std", fmt_f64(c.base_std));
        a.set_meta("dropout", fmt_f64(c.dropout));
        for (i, p) in model.perms.iter().enumerate() {
            a.set_meta(
                format!("perm{i}"),
                p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            );
        }
        push_params(&mut a, "p.", &model.params);
        a
    }

    pub fn load_flow(a: &Archive) -> Result<FlowModel> {
        expect_kind(a, "flow-checkpoint")?;
        let config = FlowConfig {
            dim: a.meta_parsed("dim")?,
            n_layers: a.meta_parsed("n_layers")?,
            n_bins: a.meta_parsed("n_bins")?,
            tail_bound: a.meta_parsed("tail_bound")?,
            hidden: a.meta_parsed("hidden")?,
            n_classes: a.meta_parsed("n_classes")?,
            embed_dim: a.meta_parsed("embed_dim")?,
            base_std: a.meta_parsed("base_std")?,
            dropout: a.meta_parsed("dropout")?,
        };
        let n_layers = config.n_layers;
        let mut model = FlowModel::init(config, 0)?;
        model.params = read_params(a, "p.")?;
        for i in 0..n_layers {
            let raw = a
                .get_meta(&format!("perm{i}"))
                .ok_or_else(|| FunctaError::Format(format!("missing perm{i}")))?;
            model.perms[i] = raw
                .split(',')
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| FunctaError::Format("unparseable permutation".into()))
                })
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(model)
    }

    pub fn save_eps_net(net: &EpsNet, schedule_steps: usize) -> Archive {
        let mut a = Archive::new("ddpm-checkpoint");
        a.set_meta("dim", net.config.dim.to_string());
        a.set_meta("width", net.config.width.to_string());
        a.set_meta("n_blocks", net.config.n_blocks.to_string());
        a.set_meta("dropout", fmt_f64(net.config.dropout));
        a.set_meta("schedule_steps", schedule_steps.to_string());
        push_params(&mut a, "p.", &net.params);
        a
    }

    pub fn load_eps_net(a: &Archive) -> Result<(EpsNet, usize)> {
        expect_kind(a, "ddpm-checkpoint")?;
        let config = EpsNetConfig {
            dim: a.meta_parsed("dim")?,
            width: a.meta_parsed("width")?,
            n_blocks: a.meta_parsed("n_blocks")?,
            dropout: a.meta_parsed("dropout")?,
        };
        let mut net = EpsNet::init(config, 0)?;
        net.params = read_params(a, "p.")?;
        Ok((net, a.meta_parsed("schedule_steps")?))
    }

    pub fn save_classifier(model: &Classifier) -> Archive {
        let mut a = Archive::new("classifier-checkpoint");
        a.set_meta("in_dim", model.config.in_dim.to_string());
        a.set_meta("n_classes", model.config.n_classes.to_string());
        a.set_meta("width", model.config.width.to_string());
        a.set_meta("depth", model.config.depth.to_string());
        a.set_meta("dropout", fmt_f64(model.config.dropout));
        push_params(&mut a, "p.", &model.params);
        a
    }

    pub fn load_classifier(a: &Archive) -> Result<Classifier> {
        expect_kind(a, "classifier-checkpoint")?;
        let config = ClassifierConfig {
            in_dim: a.meta_parsed("in_dim")?,
            n_classes: a.meta_parsed("n_classes")?,
            width: a.meta_parsed("width")?,
            depth: a.meta_parsed("depth")?,
            dropout: a.meta_parsed("dropout")?,
        };
        let mut model = Classifier::init(config, 0)?;
        model.params = read_params(a, "p.")?;
        Ok(model)
    }

    /// Guards against silently mispaired archives: a functaset must have been
    /// produced by the given base network.
    pub fn check_base_match(set_digest: &str, params: &crate::opt::ParamSet) -> Result<()> {
        let actual = params_digest(params);
        if set_digest != actual {
            return Err(FunctaError::Digest {
                found: actual,
                expected: set_digest.to_string(),
            });
        }
        Ok(())
    }

    #[cfg(test)]
    mod tests {
        use super::*;
        use ndarray::Array2;

        #[test]
        fn meta_state_roundtrip() {
            let model = LatentModulatedSiren::init(SirenConfig::new(2, 1, 4, 2), 3, 42).unwrap();
            let mut state = MetaState::new(model, InnerLoopConfig::default(), 3e-6, 7);
            state.iter = 12;
            let a = save_meta_state(&state);
            let back = load_meta_state(&Archive::from_bytes(&a.to_bytes()).unwrap()).unwrap();
            assert_eq!(back.iter, 12);
            assert_eq!(back.inner_lrs, state.inner_lrs);
            for ((n1, v1), (n2, v2)) in back.model.params.iter().zip(state.model.params.iter()) {
                assert_eq!(n1, n2);
                assert_eq!(v1, v2);
            }
            assert_eq!(back.inner_cfg.n_inner, 3);
        }

        #[test]
        fn flow_roundtrip_preserves_density() {
            let model = FlowModel::init(FlowConfig::new(3, 2), 5).unwrap();
            let a = save_flow(&model);
            let back = load_flow(&Archive::from_bytes(&a.to_bytes()).unwrap()).unwrap();
            let x = Array2::from_elem((2, 3), 0.2);
            let lp1 = model.log_prob(&x, None).unwrap();
            let lp2 = back.log_prob(&x, None).unwrap();
            assert_eq!(lp1, lp2);
            assert_eq!(model.perms, back.perms);
        }

        #[test]
        fn ddpm_and_classifier_roundtrip() {
            let net = EpsNet::init(EpsNetConfig::new(2, 8, 2), 3).unwrap();
            let a = save_eps_net(&net, 100);
            let (back, steps) = load_eps_net(&Archive::from_bytes(&a.to_bytes()).unwrap()).unwrap();
            assert_eq!(steps, 100);
            let x = Array2::from_elem((2, 2), 0.4);
            assert_eq!(net.forward(&x, &[3, 9]).unwrap(), back.forward(&x, &[3, 9]).unwrap());

            let c = Classifier::init(ClassifierConfig::new(3, 4, 8, 1), 9).unwrap();
            let ca = save_classifier(&c);
            let cb = load_classifier(&Archive::from_bytes(&ca.to_bytes()).unwrap()).unwrap();
            let y = Array2::from_elem((2, 3), 0.1);
            assert_eq!(c.logits(&y).unwrap(), cb.logits(&y).unwrap());
        }

        #[test]
        fn base_mismatch_detected() {
            let m1 = LatentModulatedSiren::init(SirenConfig::new(2, 1, 4, 2), 3, 1).unwrap();
            let m2 = LatentModulatedSiren::init(SirenConfig::new(2, 1, 4, 2), 3, 2).unwrap();
            let d = params_digest(&m1.params);
            assert!(check_base_match(&d, &m1.params).is_ok());
            assert!(check_base_match(&d, &m2.params).is_err());
        }
    }
}
