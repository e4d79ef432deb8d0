//! Single-file checkpoint: a plain-text manifest followed by a
//! little-endian `f64` payload. See `docs/checkpoint.md` for the layout.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};

pub const MAGIC: &str = "AGRNET-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub config: Config,
    /// Named scalar metrics captured when the checkpoint was written.
    pub metrics: Vec<(String, f64)>,
    pub params: ModelParams,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn new(model: &Model, config: &Config, step: usize, metrics: Vec<(String, f64)>) -> Self {
        Self {
            step,
            config: config.clone(),
            metrics,
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.params.named();
        if let Some((name, _)) = named.iter().find(|(_, p)| p.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric {
                location: format!("checkpoint array {name}"),
                detail: "refusing to write non-finite values".into(),
            });
        }
        let mut head = format!("{MAGIC} {FORMAT_VERSION}\nstep {}\n", self.step);
        for line in self.config.to_text().lines() {
            head.push_str(&format!("config {line}\n"));
        }
        for (name, v) in &self.metrics {
            head.push_str(&format!("metric {name} {v:?}\n"));
        }
        let mut offset = 0;
        for (name, p) in &named {
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            head.push_str(&format!("array {name} {} {offset} {}\n", dims.join("x"), p.len()));
            offset += p.len();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset * 8);
        for (_, p) in &named {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read(BufReader::new(f), path)
    }

    /// Parse a checkpoint; `path` is only used in error messages.
    pub fn read(mut reader: impl BufRead, path: &Path) -> Result<Checkpoint> {
        let mut line = String::new();
        let mut next_line = |reader: &mut dyn BufRead| -> Result<Option<String>> {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            Ok((n > 0).then(|| line.trim_end_matches('\n').to_string()))
        };

        let magic = next_line(&mut reader)?.ok_or_else(|| format_err(path, "empty file"))?;
        match magic.split_once(' ') {
            Some((m, v)) if m == MAGIC => {
                if v.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                    return Err(format_err(path, format!("unsupported format version `{v}`")));
                }
            }
            _ => return Err(format_err(path, "missing checkpoint header")),
        }

        let mut step = None;
        let mut config_text = String::new();
        let mut metrics = Vec::new();
        let mut arrays: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        loop {
            let l = next_line(&mut reader)?.ok_or_else(|| format_err(path, "manifest ends without `end`"))?;
            if l == "end" {
                break;
            }
            let (tag, rest) = l.split_once(' ').unwrap_or((l.as_str(), ""));
            match tag {
                "step" => step = Some(rest.parse().map_err(|_| format_err(path, format!("bad step `{rest}`")))?),
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "metric" => {
                    let (name, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| format_err(path, format!("bad metric line `{l}`")))?;
                    let v = v.parse().map_err(|_| format_err(path, format!("bad metric value `{v}`")))?;
                    metrics.push((name.to_string(), v));
                }
                "array" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let bad = || format_err(path, format!("bad array line `{l}`"));
                    if parts.len() != 4 {
                        return Err(bad());
                    }
                    let shape = parts[1]
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    let offset = parts[2].parse().map_err(|_| bad())?;
                    let len = parts[3].parse().map_err(|_| bad())?;
                    arrays.push((parts[0].to_string(), shape, offset, len));
                }
                _ => return Err(format_err(path, format!("unknown manifest line `{l}`"))),
            }
        }
        let step = step.ok_or_else(|| format_err(path, "manifest lacks a step line"))?;
        let config = Config::from_text(&config_text)?;

        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        if payload.len() % 8 != 0 {
            return Err(format_err(path, "payload length is not a multiple of 8"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        // Shapes come from the config; the manifest must agree exactly.
        let mut params = ModelParams::init(&config.model, 0);
        let mut expected = params.named_mut();
        if expected.len() != arrays.len() {
            return Err(format_err(
                path,
                format!("manifest lists {} arrays, config implies {}", arrays.len(), expected.len()),
            ));
        }
        let mut used = 0;
        for ((name, param), (m_name, shape, offset, len)) in expected.iter_mut().zip(&arrays) {
            if name != m_name || &param.shape != shape || *len != param.len() {
                return Err(format_err(
                    path,
                    format!("array `{m_name}` {shape:?} does not match expected `{name}` {:?}", param.shape),
                ));
            }
            let slice = values
                .get(*offset..offset + len)
                .ok_or_else(|| format_err(path, format!("array `{m_name}` runs past the payload")))?;
            if slice.iter().any(|v| !v.is_finite()) {
                return Err(format_err(path, format!("array `{m_name}` holds non-finite values")));
            }
            param.data.copy_from_slice(slice);
            used += len;
        }
        if used != values.len() {
            return Err(format_err(path, "payload holds values not listed in the manifest"));
        }
        drop(expected);
        Ok(Checkpoint {
            step,
            config,
            metrics,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Model, Config) {
        let mut cfg = Config::default();
        cfg.model.image_size = 48;
        cfg.model.backbone.channels = [4, 4, 8, 8];
        cfg.model.channels = 8;
        cfg.model.k = 2;
        (Model::new(cfg.model.clone(), 7).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, cfg) = small();
        let ck = Checkpoint::new(&model, &cfg, 12, vec![("mean_f1".into(), 0.1 + 0.2)]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read(&bytes[..], Path::new("mem")).unwrap();
        assert_eq!(back.step, 12);
        assert_eq!(back.config, cfg);
        assert_eq!(back.metric("mean_f1"), Some(0.1 + 0.2));
        assert_eq!(back.params, model.params);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (model, cfg) = small();
        let bytes = Checkpoint::new(&model, &cfg, 0, vec![]).to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(Checkpoint::read(&bytes[..bytes.len() - 8], p).is_err());
        assert!(Checkpoint::read(&b"garbage\n"[..], p).is_err());
        let text = String::from_utf8_lossy(&bytes);
        let cut = text.find("end\n").unwrap();
        assert!(Checkpoint::read(&bytes[..cut], p).is_err());

        let mut nan = model.clone();
        nan.params.graph.weight.data[0] = f64::NAN;
        assert!(Checkpoint::new(&nan, &cfg, 0, vec![]).to_bytes().is_err());
    }

    #[test]
    fn save_and_load_file() {
        let (model, cfg) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        Checkpoint::new(&model, &cfg, 3, vec![]).save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().params, model.params);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
