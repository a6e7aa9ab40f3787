//! Plain-text model checkpoints.
//!
//! Floats are written in shortest round-trip form, so loading a checkpoint
//! gives a model whose forward pass is bitwise identical to the saved one.
//!
//! ```text
//! flexlora-checkpoint v1
//! meta <config hash> <steps completed>
//! loss mean_squared_error
//! linear adapted layer0 r_init=8 r_max=16 alpha=16.0 init_std=0.02
//! bias 0.0,0.0,...        (or `bias none`)
//! base <rows> <cols>
//! <rows lines of comma-separated values>
//! p <rows> <cols>
//! ...
//! lambda <r>
//! <one line>
//! q <rows> <cols>
//! ...
//! activation tanh
//! linear frozen
//! bias none
//! weight <rows> <cols>
//! ...
//! end
//! ```

use std::fmt::Write as _;

use crate::adapter::SvdAdapter;
use crate::error::{Error, Result};
use crate::matrix::{parse_csv_row, Matrix};
use crate::trainer::model::{Activation, Layer, Linear, LinearWeight, Loss, ToyModel};

pub const CHECKPOINT_MAGIC: &str = "flexlora-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub steps_completed: usize,
    pub model: ToyModel,
}

fn write_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v:?}").unwrap();
    }
}

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    writeln!(out, "{name} {} {}", m.rows(), m.cols()).unwrap();
    out.push_str(&m.to_csv());
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(out, "meta {} {}", self.config_hash, self.steps_completed).unwrap();
        writeln!(out, "loss {}", self.model.loss_kind().name()).unwrap();
        for layer in self.model.layers() {
            match layer {
                Layer::Activation(a) => writeln!(out, "activation {}", a.name()).unwrap(),
                Layer::Linear(lin) => {
                    match &lin.weight {
                        LinearWeight::Frozen(_) => out.push_str("linear frozen\n"),
                        LinearWeight::Adapted(a) => writeln!(
                            out,
                            "linear adapted {} r_init={} r_max={} alpha={:?} init_std={:?}",
                            a.id(),
                            a.r_init(),
                            a.r_max(),
                            a.alpha(),
                            a.init_std()
                        )
                        .unwrap(),
                    }
                    match &lin.bias {
                        None => out.push_str("bias none\n"),
                        Some(b) => {
                            out.push_str("bias ");
                            write_floats(&mut out, b);
                            out.push('\n');
                        }
                    }
                    match &lin.weight {
                        LinearWeight::Frozen(w) => write_matrix(&mut out, "weight", w),
                        LinearWeight::Adapted(a) => {
                            write_matrix(&mut out, "base", a.base_weight());
                            write_matrix(&mut out, "p", a.p());
                            writeln!(out, "lambda {}", a.rank()).unwrap();
                            write_floats(&mut out, a.lambda());
                            out.push('\n');
                            write_matrix(&mut out, "q", a.q());
                        }
                    }
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines {
            inner: text.lines().enumerate(),
            last: 0,
        };
        let (n, magic) = lines.next_line()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(parse_err(n, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let (n, meta) = lines.next_line()?;
        let fields = keyword(n, meta, "meta", 2)?;
        let config_hash = fields[0].to_string();
        let steps_completed = parse_num(n, fields[1])?;

        let (n, loss_line) = lines.next_line()?;
        let loss = match keyword(n, loss_line, "loss", 1)?[0] {
            "mean_squared_error" => Loss::MeanSquaredError,
            "softmax_cross_entropy" => Loss::SoftmaxCrossEntropy,
            other => return Err(parse_err(n, format!("unknown loss `{other}`"))),
        };

        let mut layers = Vec::new();
        loop {
            let (n, line) = lines.next_line()?;
            let mut words = line.split_whitespace();
            match words.next() {
                Some("end") => break,
                Some("activation") => {
                    let a = match words.next() {
                        Some("tanh") => Activation::Tanh,
                        Some("relu") => Activation::Relu,
                        other => return Err(parse_err(n, format!("unknown activation {other:?}"))),
                    };
                    layers.push(Layer::Activation(a));
                }
                Some("linear") => layers.push(Layer::Linear(parse_linear(n, &mut words, &mut lines)?)),
                _ => return Err(parse_err(n, format!("unexpected line `{line}`"))),
            }
        }
        if let Some((n, _)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
            return Err(parse_err(n + 1, "content after `end`"));
        }
        let model = ToyModel::new(layers, loss).map_err(|e| parse_err(lines.last, e.to_string()))?;
        Ok(Self {
            config_hash,
            steps_completed,
            model,
        })
    }
}

struct Lines<'a, I: Iterator<Item = (usize, &'a str)>> {
    inner: I,
    last: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Lines<'a, I> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l.trim_end()))
            }
            None => Err(parse_err(self.last + 1, "unexpected end of checkpoint")),
        }
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let (n, header) = self.next_line()?;
        let dims = keyword(n, header, name, 2)?;
        let rows: usize = parse_num(n, dims[0])?;
        let cols: usize = parse_num(n, dims[1])?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, line) = self.next_line()?;
            let row = parse_csv_row(line, n)?;
            if row.len() != cols {
                return Err(parse_err(n, format!("expected {cols} values, found {}", row.len())));
            }
            data.extend(row);
        }
        Matrix::from_vec(rows, cols, data).map_err(|e| parse_err(n, e.to_string()))
    }
}

fn parse_linear<'a>(
    n: usize,
    words: &mut std::str::SplitWhitespace<'_>,
    lines: &mut Lines<'a, impl Iterator<Item = (usize, &'a str)>>,
) -> Result<Linear> {
    let kind = words.next();
    let adapter_meta = match kind {
        Some("frozen") => None,
        Some("adapted") => {
            let id = words.next().ok_or_else(|| parse_err(n, "missing adapter id"))?.to_string();
            let mut get = |key: &str| -> Result<&str> {
                let w = words.next().ok_or_else(|| parse_err(n, format!("missing `{key}=`")))?;
                w.strip_prefix(key)
                    .and_then(|rest| rest.strip_prefix('='))
                    .ok_or_else(|| parse_err(n, format!("expected `{key}=`, found `{w}`")))
            };
            let r_init: usize = parse_num(n, get("r_init")?)?;
            let r_max: usize = parse_num(n, get("r_max")?)?;
            let alpha: f64 = parse_num(n, get("alpha")?)?;
            let init_std: f64 = parse_num(n, get("init_std")?)?;
            Some((id, r_init, r_max, alpha, init_std))
        }
        other => return Err(parse_err(n, format!("unknown linear kind {other:?}"))),
    };

    let (bn, bias_line) = lines.next_line()?;
    let bias_value = keyword(bn, bias_line, "bias", 1)?[0];
    let bias = if bias_value == "none" {
        None
    } else {
        Some(parse_csv_row(bias_value, bn)?)
    };

    let weight = match adapter_meta {
        None => LinearWeight::Frozen(lines.matrix("weight")?),
        Some((id, r_init, r_max, alpha, init_std)) => {
            let base = lines.matrix("base")?;
            let p = lines.matrix("p")?;
            let (ln, header) = lines.next_line()?;
            let r: usize = parse_num(ln, keyword(ln, header, "lambda", 1)?[0])?;
            let (vn, values) = lines.next_line()?;
            let lambda = parse_csv_row(values, vn)?;
            if lambda.len() != r {
                return Err(parse_err(vn, format!("expected {r} values, found {}", lambda.len())));
            }
            let q = lines.matrix("q")?;
            LinearWeight::Adapted(
                SvdAdapter::from_parts(id, base, p, lambda, q, r_init, r_max, alpha, init_std)
                    .map_err(|e| parse_err(n, e.to_string()))?,
            )
        }
    };
    Ok(Linear { weight, bias })
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Splits `<keyword> <arg>...` and checks the argument count.
fn keyword<'a>(n: usize, line: &'a str, expected: &str, args: usize) -> Result<Vec<&'a str>> {
    let mut words = line.split_whitespace();
    if words.next() != Some(expected) {
        return Err(parse_err(n, format!("expected `{expected}`, found `{line}`")));
    }
    let rest: Vec<&str> = words.collect();
    if rest.len() != args {
        return Err(parse_err(n, format!("`{expected}` takes {args} argument(s), found {}", rest.len())));
    }
    Ok(rest)
}

fn parse_num<T: std::str::FromStr>(n: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(n, format!("`{s}` is not a valid number")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::InitStrategy;
    use crate::rng::SeededRng;

    fn model(rng: &mut SeededRng) -> ToyModel {
        let mut a = SvdAdapter::new("layer0", Matrix::gaussian(5, 4, 0.5, rng).unwrap(), 3, 6, 16.0, 0.02, rng).unwrap();
        {
            let (_, lambda, _) = a.factors_mut();
            lambda.copy_from_slice(&[0.3, -1.0 / 3.0, 1e-300]);
        }
        a.expand_rank(InitStrategy::OrthogonalInit, rng).unwrap();
        a.prune_rank().unwrap();
        let layers = vec![
            Layer::Linear(Linear {
                weight: LinearWeight::Adapted(a),
                bias: Some(vec![0.1, -0.2, 0.0, 1e-17, 3.0]),
            }),
            Layer::Activation(Activation::Tanh),
            Layer::Linear(Linear {
                weight: LinearWeight::Frozen(Matrix::gaussian(2, 5, 1.0, rng).unwrap()),
                bias: None,
            }),
        ];
        ToyModel::new(layers, Loss::SoftmaxCrossEntropy).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = SeededRng::new(3);
        let ckpt = Checkpoint {
            config_hash: "deadbeef".into(),
            steps_completed: 42,
            model: model(&mut rng),
        };
        let text = ckpt.to_text();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_text(), text);

        let x = Matrix::gaussian(4, 7, 1.0, &mut rng).unwrap();
        let y0 = ckpt.model.predict(&x).unwrap();
        let y1 = back.model.predict(&x).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y0), bits(&y1));
    }

    #[test]
    fn malformed_input_reports_line() {
        let mut rng = SeededRng::new(4);
        let text = Checkpoint {
            config_hash: "h".into(),
            steps_completed: 0,
            model: model(&mut rng),
        }
        .to_text();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let broken_at = lines.iter().position(|l| l.starts_with("p ")).unwrap() + 2;
        lines[broken_at - 1] = "1.0,abc,2.0".into();
        match Checkpoint::parse(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, broken_at),
            other => panic!("expected parse error, got {other:?}"),
        }

        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(matches!(Checkpoint::parse(&truncated), Err(Error::Parse { .. })));
        assert!(matches!(Checkpoint::parse("not a checkpoint"), Err(Error::Parse { line: 1, .. })));
    }
}
