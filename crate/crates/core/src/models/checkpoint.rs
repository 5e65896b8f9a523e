//! Plain-text model checkpoints.
//!
//! Layout (one item per line, whitespace separated):
//!
//! ```text
//! gil-checkpoint 1
//! model mlp|lstm
//! tensor <name> <rows> <cols> [activation]
//! <row 0 values>
//! ...
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! a load after a save reproduces every weight bit for bit. Biases are
//! stored as `1 x n` tensors. MLP tensors are `w0 b0 w1 b1 ...` with the
//! layer activation on each `w` line; LSTM tensors are `w_o w_i w_g w_f
//! u_o ... b_o ... w_out b_out`, with the output activation on `w_out`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GilError, Result};
use crate::linalg::{Activation, Matrix, Vector};
use crate::models::lstm::{GateParams, LstmModel};
use crate::models::mlp::{DenseLayer, MlpModel};

pub const FORMAT_VERSION: u32 = 1;
const GATE_NAMES: [&str; 4] = ["o", "i", "g", "f"];

struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    activation: Option<Activation>,
    data: Vec<f64>,
}

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, act: Option<Activation>, data: &[f64]) {
    match act {
        Some(a) => writeln!(out, "tensor {name} {rows} {cols} {}", a.name()).unwrap(),
        None => writeln!(out, "tensor {name} {rows} {cols}").unwrap(),
    }
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

pub fn mlp_to_string(model: &MlpModel) -> String {
    let mut out = format!("gil-checkpoint {FORMAT_VERSION}\nmodel mlp\n");
    for (i, l) in model.layers.iter().enumerate() {
        write_tensor(&mut out, &format!("w{i}"), l.outputs(), l.inputs(), Some(l.activation), l.w.as_slice());
        write_tensor(&mut out, &format!("b{i}"), 1, l.outputs(), None, &l.b);
    }
    out.push_str("end\n");
    out
}

pub fn lstm_to_string(model: &LstmModel) -> String {
    let mut out = format!("gil-checkpoint {FORMAT_VERSION}\nmodel lstm\n");
    let (e, d) = (model.hidden_dim(), model.input_dim());
    for (g, n) in model.gates.iter().zip(GATE_NAMES) {
        write_tensor(&mut out, &format!("w_{n}"), e, d, None, g.w.as_slice());
    }
    for (g, n) in model.gates.iter().zip(GATE_NAMES) {
        write_tensor(&mut out, &format!("u_{n}"), e, e, None, g.u.as_slice());
    }
    for (g, n) in model.gates.iter().zip(GATE_NAMES) {
        write_tensor(&mut out, &format!("b_{n}"), 1, e, None, &g.b);
    }
    let o = &model.out;
    write_tensor(&mut out, "w_out", o.outputs(), o.inputs(), Some(o.activation), o.w.as_slice());
    write_tensor(&mut out, "b_out", 1, o.outputs(), None, &o.b);
    out.push_str("end\n");
    out
}

fn parse(text: &str) -> Result<(String, Vec<Tensor>)> {
    let bad = |line: usize, msg: &str| GilError::Contract(format!("checkpoint line {}: {msg}", line + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == format!("gil-checkpoint {FORMAT_VERSION}") => {}
        Some((i, l)) => return Err(bad(i, &format!("unsupported header {l:?}"))),
        None => return Err(bad(0, "empty file")),
    }
    let kind = match lines.next() {
        Some((_, l)) if l.starts_with("model ") => l[6..].trim().to_string(),
        _ => return Err(bad(1, "expected `model <kind>`")),
    };
    let mut tensors = Vec::new();
    loop {
        let (i, line) = lines.next().ok_or_else(|| bad(0, "missing `end`"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end"] => break,
            ["tensor", name, rows, cols, rest @ ..] => {
                let rows: usize = rows.parse().map_err(|_| bad(i, "bad row count"))?;
                let cols: usize = cols.parse().map_err(|_| bad(i, "bad column count"))?;
                let activation = match rest {
                    [] => None,
                    [a] => Some(Activation::from_name(a).ok_or_else(|| bad(i, "unknown activation"))?),
                    _ => return Err(bad(i, "trailing tokens")),
                };
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (j, row) = lines.next().ok_or_else(|| bad(i, "truncated tensor"))?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|_| bad(j, "bad number"))?);
                    }
                    if data.len() - before != cols {
                        return Err(bad(j, "row length does not match header"));
                    }
                }
                tensors.push(Tensor { name: name.to_string(), rows, cols, activation, data });
            }
            _ => return Err(bad(i, "expected `tensor` or `end`")),
        }
    }
    Ok((kind, tensors))
}

fn take(tensors: &mut std::vec::IntoIter<Tensor>, name: &str) -> Result<Tensor> {
    match tensors.next() {
        Some(t) if t.name == name => Ok(t),
        Some(t) => Err(GilError::Contract(format!("checkpoint: expected tensor {name}, found {}", t.name))),
        None => Err(GilError::Contract(format!("checkpoint: missing tensor {name}"))),
    }
}

pub fn mlp_from_str(text: &str) -> Result<MlpModel> {
    let (kind, tensors) = parse(text)?;
    if kind != "mlp" {
        return Err(GilError::Contract(format!("checkpoint holds a {kind} model, not mlp")));
    }
    let n = tensors.len() / 2;
    let mut it = tensors.into_iter();
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let w = take(&mut it, &format!("w{i}"))?;
        let b = take(&mut it, &format!("b{i}"))?;
        if b.cols != w.rows {
            return Err(GilError::Contract(format!("checkpoint: b{i} length does not match w{i}")));
        }
        if let Some(prev) = layers.last().map(|l: &DenseLayer| l.outputs()) {
            if prev != w.cols {
                return Err(GilError::Contract(format!("checkpoint: w{i} does not chain with the previous layer")));
            }
        }
        let activation = w.activation.ok_or_else(|| GilError::Contract(format!("checkpoint: w{i} has no activation")))?;
        layers.push(DenseLayer { w: Matrix::from_vec(w.rows, w.cols, w.data), b: Vector(b.data), activation });
    }
    if layers.len() < 2 {
        return Err(GilError::Contract("checkpoint: an mlp needs at least two layers".into()));
    }
    Ok(MlpModel { layers })
}

pub fn lstm_from_str(text: &str) -> Result<LstmModel> {
    let (kind, tensors) = parse(text)?;
    if kind != "lstm" {
        return Err(GilError::Contract(format!("checkpoint holds a {kind} model, not lstm")));
    }
    let mut it = tensors.into_iter();
    let mut ws = Vec::new();
    for n in GATE_NAMES {
        ws.push(take(&mut it, &format!("w_{n}"))?);
    }
    let mut us = Vec::new();
    for n in GATE_NAMES {
        us.push(take(&mut it, &format!("u_{n}"))?);
    }
    let mut bs = Vec::new();
    for n in GATE_NAMES {
        bs.push(take(&mut it, &format!("b_{n}"))?);
    }
    let w_out = take(&mut it, "w_out")?;
    let b_out = take(&mut it, "b_out")?;
    let (e, d) = (ws[0].rows, ws[0].cols);
    let consistent = ws.iter().all(|w| (w.rows, w.cols) == (e, d))
        && us.iter().all(|u| (u.rows, u.cols) == (e, e))
        && bs.iter().all(|b| b.cols == e)
        && w_out.cols == e
        && b_out.cols == w_out.rows;
    if !consistent {
        return Err(GilError::Contract("checkpoint: inconsistent lstm tensor shapes".into()));
    }
    let gates = ws
        .into_iter()
        .zip(us)
        .zip(bs)
        .map(|((w, u), b)| GateParams {
            w: Matrix::from_vec(e, d, w.data),
            u: Matrix::from_vec(e, e, u.data),
            b: Vector(b.data),
        })
        .collect();
    let activation = w_out.activation.ok_or_else(|| GilError::Contract("checkpoint: w_out has no activation".into()))?;
    let out = DenseLayer { w: Matrix::from_vec(w_out.rows, e, w_out.data), b: Vector(b_out.data), activation };
    Ok(LstmModel { gates, out })
}

pub fn save_mlp(model: &MlpModel, path: &Path) -> Result<()> {
    std::fs::write(path, mlp_to_string(model))?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<MlpModel> {
    let text = std::fs::read_to_string(path).map_err(|e| GilError::load(path, e.to_string()))?;
    mlp_from_str(&text)
}

pub fn save_lstm(model: &LstmModel, path: &Path) -> Result<()> {
    std::fs::write(path, lstm_to_string(model))?;
    Ok(())
}

pub fn load_lstm(path: &Path) -> Result<LstmModel> {
    let text = std::fs::read_to_string(path).map_err(|e| GilError::load(path, e.to_string()))?;
    lstm_from_str(&text)
}
