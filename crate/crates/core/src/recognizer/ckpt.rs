//! Checkpoint persistence: a portable text dump of the architecture, the
//! vocabulary, and every tensor as raw IEEE-754 bit patterns, closed by an
//! FNV checksum. Round trips are bit-exact.

use super::params::{ConvLayer, ModelParams};
use super::{ModelConfig, Vocabulary};
use crate::annotation::{format_codepoint, parse_codepoint};
use crate::error::{Error, Result};
use crate::{seed, textio};
use std::fmt::Write as _;
use std::path::Path;

pub const CKPT_HEADER: &str = "#kforge-ckpt v1";

fn checksum_of(records: &[String]) -> u64 {
    let joined = records.join("\n");
    seed::fnv1a64(joined.as_bytes())
}

fn hex_of(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        write!(s, "{:016x}", v.to_bits()).unwrap();
    }
    s
}

fn values_of(hex: &str, expect: usize) -> Option<Vec<f64>> {
    if hex.len() != expect * 16 || !hex.is_ascii() {
        return None;
    }
    let mut out = Vec::with_capacity(expect);
    for chunk in hex.as_bytes().chunks(16) {
        let s = std::str::from_utf8(chunk).ok()?;
        let bits = u64::from_str_radix(s, 16).ok()?;
        out.push(f64::from_bits(bits));
    }
    Some(out)
}

fn arch_record(config: &ModelConfig) -> String {
    let channels: Vec<String> = config.channels.iter().map(|c| c.to_string()).collect();
    format!(
        "arch\tchannels={}\tembed={}\thidden={}\tattn={}\tcoords={}\tmax_image={}",
        channels.join(","),
        config.embed_dim,
        config.hidden_dim,
        config.attn_dim,
        config.attend_coords as u8,
        config.max_image
    )
}

/// Write a checkpoint. The layout is: one `arch` record, a `vocab` count,
/// one `cp` record per codepoint in token order, one `tensor` record per
/// tensor in canonical order, and a trailing `checksum` record covering
/// everything before it.
pub fn save_params(path: &Path, params: &ModelParams, meta: &[String]) -> Result<()> {
    let mut records = Vec::new();
    records.push(arch_record(&params.config));
    let cps = params.config.vocab.codepoints();
    records.push(format!("vocab\t{}", cps.len()));
    for &cp in cps {
        records.push(format!("cp\t{}", format_codepoint(cp)));
    }
    // named_slices and expected_shapes share one canonical order.
    let table = ModelParams::expected_shapes(&params.config);
    for ((name, slice), (tname, dims)) in params.named_slices().iter().zip(table.iter()) {
        debug_assert_eq!(name, tname);
        let shape: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        records.push(format!("tensor\t{}\t{}\t{}", name, shape.join("x"), hex_of(slice)));
    }
    let sum = checksum_of(&records);
    records.push(format!("checksum\t{sum:016x}"));
    textio::write_records(path, CKPT_HEADER, meta, &records)
}

fn parse_arch(pathstr: &str, line_no: usize, record: &str) -> Result<ModelConfig> {
    let mut channels: Option<Vec<usize>> = None;
    let mut embed = None;
    let mut hidden = None;
    let mut attn = None;
    let mut coords = None;
    let mut max_image = None;
    for field in record.split('\t').skip(1) {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            Error::parse(pathstr, line_no, format!("bad arch field {field:?}"))
        })?;
        let bad = |v: &str| Error::parse(pathstr, line_no, format!("bad {key} value {v:?}"));
        match key {
            "channels" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|c| c.parse::<usize>()).collect();
                channels = Some(parsed.map_err(|_| bad(value))?);
            }
            "embed" => embed = Some(value.parse().map_err(|_| bad(value))?),
            "hidden" => hidden = Some(value.parse().map_err(|_| bad(value))?),
            "attn" => attn = Some(value.parse().map_err(|_| bad(value))?),
            "coords" => {
                coords = Some(match value {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(value)),
                })
            }
            "max_image" => max_image = Some(value.parse().map_err(|_| bad(value))?),
            _ => return Err(Error::parse(pathstr, line_no, format!("unknown arch key {key:?}"))),
        }
    }
    let missing = |what: &str| Error::parse(pathstr, line_no, format!("arch misses {what}"));
    Ok(ModelConfig {
        channels: channels.ok_or_else(|| missing("channels"))?,
        embed_dim: embed.ok_or_else(|| missing("embed"))?,
        hidden_dim: hidden.ok_or_else(|| missing("hidden"))?,
        attn_dim: attn.ok_or_else(|| missing("attn"))?,
        attend_coords: coords.ok_or_else(|| missing("coords"))?,
        max_image: max_image.ok_or_else(|| missing("max_image"))?,
        vocab: Vocabulary::from_codepoints(&[]),
    })
}

/// Load a checkpoint written by [`save_params`]. Verifies the format
/// version, the checksum, and every tensor shape.
pub fn load_params(path: &Path) -> Result<ModelParams> {
    let pathstr = path.display().to_string();
    let records = textio::read_records(path, CKPT_HEADER)?;
    let corrupt =
        |msg: String| Error::Corrupt { path: pathstr.clone(), msg };

    // Checksum footer first: everything else is untrusted until verified.
    let Some(((_, last), body)) = records.split_last() else {
        return Err(corrupt("checkpoint has no records".into()));
    };
    let body_records: Vec<String> = body.iter().map(|(_, r)| r.clone()).collect();
    let expected_sum = last
        .strip_prefix("checksum\t")
        .and_then(|s| u64::from_str_radix(s, 16).ok())
        .ok_or_else(|| corrupt("missing checksum footer".into()))?;
    let actual = checksum_of(&body_records);
    if actual != expected_sum {
        return Err(corrupt(format!(
            "checksum mismatch: footer {expected_sum:016x}, computed {actual:016x}"
        )));
    }

    let mut iter = body.iter();
    let (arch_line, arch_record_str) = iter
        .next()
        .ok_or_else(|| corrupt("checkpoint has no arch record".into()))?;
    if !arch_record_str.starts_with("arch\t") {
        return Err(corrupt("first record must be arch".into()));
    }
    let mut config = parse_arch(&pathstr, *arch_line, arch_record_str)?;

    let (count_line, count_record) = iter
        .next()
        .ok_or_else(|| corrupt("checkpoint has no vocab record".into()))?;
    let n_cps: usize = count_record
        .strip_prefix("vocab\t")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(&pathstr, *count_line, "bad vocab count"))?;
    let mut cps = Vec::with_capacity(n_cps);
    for _ in 0..n_cps {
        let (line_no, record) = iter
            .next()
            .ok_or_else(|| corrupt("vocabulary truncated".into()))?;
        let token = record
            .strip_prefix("cp\t")
            .ok_or_else(|| Error::parse(&pathstr, *line_no, "expected cp record"))?;
        let cp = parse_codepoint(token).map_err(|m| Error::parse(&pathstr, *line_no, m))?;
        if let Some(&prev) = cps.last() {
            if cp <= prev {
                return Err(Error::parse(
                    &pathstr,
                    *line_no,
                    "vocabulary codepoints must be strictly ascending",
                ));
            }
        }
        cps.push(cp);
    }
    config.vocab = Vocabulary::from_codepoints(&cps);
    config.validate()?;

    // Tensors in canonical order.
    let expected = ModelParams::expected_shapes(&config);
    let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for (name, dims) in &expected {
        let (line_no, record) = iter
            .next()
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        let fields: Vec<&str> = record.split('\t').collect();
        if fields.len() != 4 || fields[0] != "tensor" {
            return Err(Error::parse(&pathstr, *line_no, "expected tensor record"));
        }
        if fields[1] != name {
            return Err(corrupt(format!(
                "tensor out of order: expected {name}, found {}",
                fields[1]
            )));
        }
        let found: std::result::Result<Vec<usize>, _> =
            fields[2].split('x').map(|d| d.parse::<usize>()).collect();
        let found = found.map_err(|_| Error::parse(&pathstr, *line_no, "bad shape"))?;
        if &found != dims {
            return Err(Error::Shape {
                tensor: name.clone(),
                expected: dims.clone(),
                found,
            });
        }
        let count: usize = dims.iter().product();
        let values = values_of(fields[3], count)
            .ok_or_else(|| Error::parse(&pathstr, *line_no, "bad tensor payload"))?;
        tensors.push(values);
    }
    if let Some((line_no, _)) = iter.next() {
        return Err(Error::parse(&pathstr, *line_no, "trailing records after tensors"));
    }

    // Assemble: zero-shaped params, then overwrite slice by slice.
    let mut params = blank_params(config);
    {
        let mut slices = params.slices_mut();
        debug_assert_eq!(slices.len(), tensors.len());
        for (slice, values) in slices.iter_mut().zip(tensors.iter()) {
            slice.copy_from_slice(values);
        }
    }
    params.check_shapes()?;
    Ok(params)
}

/// Zero parameters with the right shapes for `config`.
fn blank_params(config: ModelConfig) -> ModelParams {
    use ndarray::{Array1, Array2};
    let mut conv = Vec::with_capacity(config.channels.len());
    let mut in_ch = 1usize;
    for &out_ch in &config.channels {
        conv.push(ConvLayer {
            w: Array2::zeros((out_ch, in_ch * 9)),
            b: Array1::zeros(out_ch),
        });
        in_ch = out_ch;
    }
    let v = config.vocab_size();
    let p = config.embed_dim;
    let h = config.hidden_dim;
    let a = config.attn_dim;
    let dc = config.ctx_dim();
    ModelParams {
        conv,
        embed: Array2::zeros((v, p)),
        lstm: super::params::LstmParams {
            w_ih: Array2::zeros((4 * h, p + dc)),
            w_hh: Array2::zeros((4 * h, h)),
            b: Array1::zeros(4 * h),
        },
        attn: super::params::AttnParams {
            w_h: Array2::zeros((a, h)),
            u_f: Array2::zeros((a, dc)),
            b: Array1::zeros(a),
            v: Array1::zeros(a),
        },
        hidden_proj: Array2::zeros((p, h)),
        context_proj: Array2::zeros((p, dc)),
        out_proj: Array2::zeros((v, p)),
        config,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recognizer::forward::greedy_decode_gray;
    use crate::recognizer::params::tiny_config;
    use crate::seed;
    use ndarray::Array3;
    use rand::Rng;

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = ModelParams::init(tiny_config(3), 99).unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        save_params(&path, &params, &["seed=99".into()]).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        let a: Vec<u64> = params.to_flat_vec().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = loaded.to_flat_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_is_identical_after_round_trip() {
        let params = ModelParams::init(tiny_config(2), 5).unwrap();
        let mut rng = seed::rng(12);
        let gray = Array3::from_shape_fn((1, 16, 16), |_| rng.gen_range(0.0..1.0));
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        save_params(&path, &params, &[]).unwrap();
        let loaded = load_params(&path).unwrap();
        let a = greedy_decode_gray(&params, &gray, 10, 1.0).unwrap();
        let b = greedy_decode_gray(&loaded, &gray, 10, 1.0).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn flipped_payload_fails_the_checksum() {
        let params = ModelParams::init(tiny_config(1), 7).unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        save_params(&path, &params, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Flip one hex digit inside the embed tensor payload.
        let idx = text.find("tensor\tembed").unwrap();
        let payload_at = text[idx..].find("\t0").map(|p| idx + p + 1).unwrap_or(idx + 20);
        let mut bytes = text.into_bytes();
        for b in &mut bytes[payload_at..payload_at + 24] {
            if b.is_ascii_hexdigit() {
                *b = if *b == b'0' { b'1' } else { b'0' };
                break;
            }
        }
        std::fs::write(&path, bytes).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, "#kforge-ckpt v2\nchecksum\t0000000000000000\n").unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(matches!(err, Error::Version { .. }), "{err}");
    }

    #[test]
    fn tampered_shape_names_the_tensor() {
        let params = ModelParams::init(tiny_config(1), 7).unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        save_params(&path, &params, &[]).unwrap();
        // Rewrite lstm.w_hh's shape, then refresh the checksum so the
        // shape check (not the checksum) trips.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut records: Vec<String> = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.starts_with("checksum\t") {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor\tlstm.w_hh\t") {
                let (_, payload) = rest.split_once('\t').unwrap();
                records.push(format!("tensor\tlstm.w_hh\t999x5\t{payload}"));
            } else {
                records.push(line.to_string());
            }
        }
        let sum = checksum_of(&records);
        records.push(format!("checksum\t{sum:016x}"));
        let mut out = String::from("#kforge-ckpt v1\n");
        out.push_str(&records.join("\n"));
        out.push('\n');
        std::fs::write(&path, out).unwrap();
        let err = load_params(&path).unwrap_err();
        match err {
            Error::Shape { tensor, .. } => assert_eq!(tensor, "lstm.w_hh"),
            other => panic!("expected shape error, got {other}"),
        }
    }

    #[test]
    fn vocabulary_order_survives_and_is_validated() {
        let params = ModelParams::init(tiny_config(4), 2).unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        save_params(&path, &params, &[]).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.config.vocab.codepoints(), params.config.vocab.codepoints());

        // Swapping two cp lines breaks the ascending-order rule.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut records: Vec<String> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("checksum\t"))
            .map(str::to_string)
            .collect();
        let first_cp = records.iter().position(|r| r.starts_with("cp\t")).unwrap();
        records.swap(first_cp, first_cp + 1);
        let sum = checksum_of(&records);
        records.push(format!("checksum\t{sum:016x}"));
        let mut out = String::from("#kforge-ckpt v1\n");
        out.push_str(&records.join("\n"));
        out.push('\n');
        std::fs::write(&path, out).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("ascending"), "{err}");
    }
}
