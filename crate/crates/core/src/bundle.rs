//! Weight bundle file: a short text header followed by the raw INT8 payload.
//!
//! ```text
//! TFACCEL-WEIGHTS 1
//! d_model 64
//! d_ff 256
//! heads 1
//! seq_len 8
//! scale mha.q_proj 0.0123        (optional, one line per activation scale)
//! tensor head0.w_q 64 64 0.0071  (name rows cols scale, in canonical order)
//! ...
//! end
//! <payload: every tensor row-major as i8, in header order>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::plan::{ModelConfig, HEAD_DIM};
use crate::quant::{QuantParams, QuantTensor};
use crate::scheduler::{FfnScales, MhaScales, QuantHeadWeights, QuantResBlockWeights};

pub const MAGIC: &str = "TFACCEL-WEIGHTS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub config: ModelConfig,
    pub weights: QuantResBlockWeights,
    pub mha_scales: Option<MhaScales>,
    pub ffn_scales: Option<FfnScales>,
}

const MHA_SCALE_NAMES: [&str; 5] = ["q_proj", "k_proj", "v_proj", "attention", "output"];

fn mha_scale_list(s: &MhaScales) -> [QuantParams; 5] {
    [s.q_proj, s.k_proj, s.v_proj, s.attention, s.output]
}

impl WeightBundle {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let cfg = &self.config;
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "d_model {}", cfg.d_model())?;
        writeln!(w, "d_ff {}", cfg.d_ff())?;
        writeln!(w, "heads {}", cfg.heads())?;
        writeln!(w, "seq_len {}", cfg.seq_len())?;
        if let Some(s) = &self.mha_scales {
            for (name, p) in MHA_SCALE_NAMES.iter().zip(mha_scale_list(s)) {
                writeln!(w, "scale mha.{name} {}", p.scale())?;
            }
        }
        if let Some(s) = &self.ffn_scales {
            writeln!(w, "scale ffn.hidden {}", s.hidden.scale())?;
            writeln!(w, "scale ffn.output {}", s.output.scale())?;
        }
        let named = self.weights.named();
        for (name, t) in &named {
            writeln!(w, "tensor {name} {} {} {}", t.rows(), t.cols(), t.scale())?;
        }
        writeln!(w, "end")?;
        for (_, t) in &named {
            let bytes: Vec<u8> = t.values().iter().map(|&v| v as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut lineno = 0usize;
        let mut next_line = |r: &mut BufReader<_>| -> Result<(usize, String)> {
            let mut line = String::new();
            lineno += 1;
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Bundle(format!(
                    "line {lineno}: unexpected end of header"
                )));
            }
            Ok((lineno, line.trim_end().to_string()))
        };

        let (n, magic) = next_line(&mut r)?;
        if magic != format!("{MAGIC} {VERSION}") {
            return Err(Error::Bundle(format!(
                "line {n}: expected `{MAGIC} {VERSION}`, found `{magic}`"
            )));
        }
        let mut dims = [0usize; 4];
        for (slot, field) in dims.iter_mut().zip(["d_model", "d_ff", "heads", "seq_len"]) {
            let (n, line) = next_line(&mut r)?;
            *slot = parse_field(n, &line, field)?;
        }
        let config = ModelConfig::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|e| Error::Bundle(format!("header: {e}")))?;

        let mut scales: Vec<(String, QuantParams)> = Vec::new();
        let mut tensors: Vec<(String, usize, usize, QuantParams)> = Vec::new();
        loop {
            let (n, line) = next_line(&mut r)?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["end"] => break,
                ["scale", name, value] if tensors.is_empty() => {
                    scales.push((name.to_string(), parse_scale(n, value)?));
                }
                ["tensor", name, rows, cols, value] => {
                    let rows = parse_num(n, "rows", rows)?;
                    let cols = parse_num(n, "cols", cols)?;
                    tensors.push((name.to_string(), rows, cols, parse_scale(n, value)?));
                }
                _ => {
                    return Err(Error::Bundle(format!(
                        "line {n}: unrecognised header line `{line}`"
                    )))
                }
            }
        }

        let expected = expected_tensors(&config);
        if tensors.len() != expected.len() {
            return Err(Error::Bundle(format!(
                "expected {} tensors, header lists {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut loaded = Vec::with_capacity(tensors.len());
        for ((name, rows, cols, params), (want, wr, wc)) in tensors.into_iter().zip(expected) {
            if name != want || rows != wr || cols != wc {
                return Err(Error::Bundle(format!(
                    "tensor `{name}` {rows}x{cols}: expected `{want}` {wr}x{wc}"
                )));
            }
            let mut buf = vec![0u8; rows * cols];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Bundle(format!("payload truncated in tensor `{name}`")))?;
            let values = buf.into_iter().map(|b| b as i8).collect();
            let t = QuantTensor::new(rows, cols, values, params)
                .map_err(|e| Error::Bundle(format!("tensor `{name}`: {e}")))?;
            loaded.push(t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Bundle(format!(
                "{} trailing bytes after payload",
                rest.len()
            )));
        }

        let weights = assemble(&config, loaded);
        let (mha_scales, ffn_scales) = assemble_scales(&scales)?;
        Ok(Self {
            config,
            weights,
            mha_scales,
            ffn_scales,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

fn parse_num(line: usize, field: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| {
        Error::Bundle(format!(
            "line {line}: `{field}` must be a non-negative integer, found `{v}`"
        ))
    })
}

fn parse_field(line: usize, text: &str, field: &str) -> Result<usize> {
    match text.split_whitespace().collect::<Vec<_>>().as_slice() {
        [name, value] if *name == field => parse_num(line, field, value),
        _ => Err(Error::Bundle(format!(
            "line {line}: expected `{field} <n>`, found `{text}`"
        ))),
    }
}

fn parse_scale(line: usize, v: &str) -> Result<QuantParams> {
    let s: f64 = v
        .parse()
        .map_err(|_| Error::Bundle(format!("line {line}: bad scale `{v}`")))?;
    QuantParams::new(s).map_err(|e| Error::Bundle(format!("line {line}: {e}")))
}

fn expected_tensors(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (d, f) = (cfg.d_model(), cfg.d_ff());
    let mut out = Vec::new();
    for i in 0..cfg.heads() {
        for m in ["w_q", "w_k", "w_v"] {
            out.push((format!("head{i}.{m}"), d, HEAD_DIM));
        }
        for b in ["b_q", "b_k", "b_v"] {
            out.push((format!("head{i}.{b}"), 1, HEAD_DIM));
        }
    }
    for (name, r, c) in [
        ("w_g", d, d),
        ("b_g", 1, d),
        ("w_1", d, f),
        ("b_1", 1, f),
        ("w_2", f, d),
        ("b_2", 1, d),
        ("gamma", 1, d),
        ("beta", 1, d),
    ] {
        out.push((name.to_string(), r, c));
    }
    out
}

fn assemble(cfg: &ModelConfig, tensors: Vec<QuantTensor>) -> QuantResBlockWeights {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    let heads = (0..cfg.heads())
        .map(|_| QuantHeadWeights {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            b_q: next(),
            b_k: next(),
            b_v: next(),
        })
        .collect();
    QuantResBlockWeights {
        heads,
        w_g: next(),
        b_g: next(),
        w_1: next(),
        b_1: next(),
        w_2: next(),
        b_2: next(),
        gamma: next(),
        beta: next(),
    }
}

fn assemble_scales(
    scales: &[(String, QuantParams)],
) -> Result<(Option<MhaScales>, Option<FfnScales>)> {
    let find = |name: &str| scales.iter().find(|(n, _)| n == name).map(|(_, p)| *p);
    for (name, _) in scales {
        let known = name
            .strip_prefix("mha.")
            .is_some_and(|n| MHA_SCALE_NAMES.contains(&n))
            || name == "ffn.hidden"
            || name == "ffn.output";
        if !known {
            return Err(Error::Bundle(format!("unknown activation scale `{name}`")));
        }
    }
    let mha: Vec<Option<QuantParams>> = MHA_SCALE_NAMES
        .iter()
        .map(|n| find(&format!("mha.{n}")))
        .collect();
    let mha = match mha.iter().filter(|p| p.is_some()).count() {
        0 => None,
        5 => Some(MhaScales {
            q_proj: mha[0].expect("counted"),
            k_proj: mha[1].expect("counted"),
            v_proj: mha[2].expect("counted"),
            attention: mha[3].expect("counted"),
            output: mha[4].expect("counted"),
        }),
        _ => return Err(Error::Bundle("incomplete set of mha.* scales".into())),
    };
    let ffn = match (find("ffn.hidden"), find("ffn.output")) {
        (None, None) => None,
        (Some(hidden), Some(output)) => Some(FfnScales { hidden, output }),
        _ => return Err(Error::Bundle("incomplete set of ffn.* scales".into())),
    };
    Ok((mha, ffn))
}
