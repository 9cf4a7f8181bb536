//! Plain-text checkpoint container.
//!
//! ```text
//! mge-checkpoint 1
//! model kind=convstack channels=3,8,3 depth=0 kernel=3 zero_final=true
//! tensor conv0.weight 8,3,3,3
//! <values separated by spaces>
//! end
//! ```
//!
//! The `model` line is optional. Values use Rust's shortest round-trip
//! float formatting, so save then load is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::tensor::{Params, Tensor};

const MAGIC: &str = "mge-checkpoint 1";

pub fn to_string(params: &Params, config: Option<&ModelConfig>) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    if let Some(c) = config {
        let channels: Vec<String> = c.channels.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(
            out,
            "model kind={} channels={} depth={} kernel={} zero_final={}",
            c.kind,
            channels.join(","),
            c.depth,
            c.kernel_size,
            c.zero_final
        );
    }
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "tensor {name} {}", dims.join(","));
        let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint { line, msg: msg.into() }
}

fn parse_model(line_no: usize, rest: &str) -> Result<ModelConfig> {
    let mut kind = None;
    let mut channels = None;
    let mut depth = 0;
    let mut kernel_size = 3;
    let mut zero_final = true;
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| bad(line_no, format!("expected key=value, got {field:?}")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(line_no, format!("{k}: {e}")));
        match k {
            "kind" => kind = Some(v.parse::<ModelKind>().map_err(|e| bad(line_no, e.to_string()))?),
            "channels" => channels = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
            "depth" => depth = num(v)?,
            "kernel" => kernel_size = num(v)?,
            "zero_final" => zero_final = v.parse().map_err(|_| bad(line_no, format!("zero_final: {v:?}")))?,
            _ => return Err(bad(line_no, format!("unknown model field {k:?}"))),
        }
    }
    Ok(ModelConfig {
        kind: kind.ok_or_else(|| bad(line_no, "missing kind"))?,
        channels: channels.ok_or_else(|| bad(line_no, "missing channels"))?,
        depth,
        kernel_size,
        zero_final,
    })
}

pub fn from_str(text: &str) -> Result<(Params, Option<ModelConfig>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(bad(1, format!("expected header {MAGIC:?}"))),
    }
    let mut params = Params::new();
    let mut config = None;
    while let Some((n, line)) = lines.next() {
        let line = line.trim();
        if line == "end" {
            return Ok((params, config));
        }
        if let Some(rest) = line.strip_prefix("model ") {
            config = Some(parse_model(n, rest)?);
            continue;
        }
        let rest = line.strip_prefix("tensor ").ok_or_else(|| bad(n, format!("unexpected line {line:?}")))?;
        let (name, dims) = rest.split_once(' ').ok_or_else(|| bad(n, "expected `tensor <name> <dims>`"))?;
        let shape = if dims.trim().is_empty() {
            Vec::new()
        } else {
            dims.trim()
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|e| bad(n, format!("dimension {d:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?
        };
        let (vn, vals) = lines.next().ok_or_else(|| bad(n + 1, "missing values"))?;
        let data = vals
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| bad(vn, format!("value {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| bad(vn, e.to_string()))?;
        if params.insert(name, t).is_some() {
            return Err(bad(n, format!("duplicate tensor {name:?}")));
        }
    }
    Err(bad(text.lines().count(), "missing `end`"))
}

pub fn save(path: &Path, params: &Params, config: Option<&ModelConfig>) -> Result<()> {
    std::fs::write(path, to_string(params, config)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<(Params, Option<ModelConfig>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::unet(2, &[4, 8], 1).with_zero_final(false);
        let (_, params) = crate::models::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let text = to_string(&params, Some(&cfg));
        let (back, back_cfg) = from_str(&text).unwrap();
        assert_eq!(back_cfg, Some(cfg));
        assert_eq!(back.len(), params.len());
        for ((a, ta), (b, tb)) in params.iter().zip(back.iter()) {
            assert_eq!(a, b);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn special_values_survive() {
        let mut p = Params::new();
        p.insert("x", Tensor::new(vec![4], vec![-0.0, 1e-310, f64::MAX, 0.1]).unwrap());
        let (back, cfg) = from_str(&to_string(&p, None)).unwrap();
        assert!(cfg.is_none());
        let got: Vec<u64> = back.get("x").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = p.get("x").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn rejects_malformed() {
        assert!(from_str("nope\nend\n").is_err());
        assert!(from_str("mge-checkpoint 1\ntensor a 2\n1.0\nend\n").is_err());
        assert!(from_str("mge-checkpoint 1\ntensor a 1\n1.0\n").is_err());
        assert!(from_str("mge-checkpoint 1\ntensor a 1\nfoo\nend\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut p = Params::new();
        p.insert("b", Tensor::new(vec![2], vec![1.5, -2.25]).unwrap());
        save(&path, &p, None).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back.get("b").unwrap().data(), &[1.5, -2.25]);
    }
}
