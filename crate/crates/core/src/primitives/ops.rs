//! Implementations of the built-in primitives: concept masks, mask/grid
//! math, reductions, and scalar field lookups.


use thiserror::Error;

use super::value::{Grid, Kind, Mask, Value};
use super::{InputDescriptor, RegistryConfig};

/// The fixed scalar-field vocabulary.
pub const SCALAR_FIELDS: [&str; 4] = ["temperature", "precipitation", "nightlight", "elevation"];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PrimError {
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("unknown scalar field {0:?} (expected one of temperature, precipitation, nightlight, elevation)")]
    UnknownField(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: String, detail: String },
    #[error("grid dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("{op} applied to {found} (signature mismatch escaped the type checker)")]
    BadArgs { op: String, found: String },
}

fn domain(op: &str, detail: impl Into<String>) -> PrimError {
    PrimError::Domain {
        op: op.to_string(),
        detail: detail.into(),
    }
}

fn bad_args(op: &str, args: &[Value]) -> PrimError {
    let found = args
        .iter()
        .map(|a| a.kind().to_string())
        .collect::<Vec<_>>()
        .join(", ");
    PrimError::BadArgs {
        op: op.to_string(),
        found,
    }
}

fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), PrimError> {
    if a != b {
        return Err(PrimError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

fn map_grid(g: &Grid, f: impl Fn(f64) -> f64) -> Grid {
    Grid::new(g.width(), g.height(), g.cells().iter().map(|&c| f(c)).collect())
}

fn try_map_grid(
    op: &str,
    g: &Grid,
    f: impl Fn(f64) -> Result<f64, String>,
) -> Result<Grid, PrimError> {
    let mut cells = Vec::with_capacity(g.len());
    for &c in g.cells() {
        cells.push(f(c).map_err(|detail| domain(op, detail))?);
    }
    Ok(Grid::new(g.width(), g.height(), cells))
}

fn zip_grids(a: &Grid, b: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid, PrimError> {
    check_dims((a.width(), a.height()), (b.width(), b.height()))?;
    let cells = a
        .cells()
        .iter()
        .zip(b.cells())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Grid::new(a.width(), a.height(), cells))
}

/// Lift a binary scalar op over the Scalar/Grid overloads.
fn arith(op: &str, args: &[Value], f: impl Fn(f64, f64) -> f64) -> Result<Value, PrimError> {
    match (&args[0], &args[1]) {
        (Value::Scalar(a), Value::Scalar(b)) => Ok(Value::Scalar(f(*a, *b))),
        (Value::Grid(a), Value::Grid(b)) => Ok(Value::Grid(zip_grids(a, b, f)?)),
        (Value::Grid(a), Value::Scalar(b)) => Ok(Value::Grid(map_grid(a, |x| f(x, *b)))),
        (Value::Scalar(a), Value::Grid(b)) => Ok(Value::Grid(map_grid(b, |y| f(*a, y)))),
        _ => Err(bad_args(op, args)),
    }
}

/// Denominator clamped away from zero at `eps`; zero counts as positive.
fn guarded_div(num: f64, den: f64, eps: f64) -> f64 {
    let den = if den.abs() < eps {
        if den.is_sign_negative() {
            -eps
        } else {
            eps
        }
    } else {
        den
    };
    num / den
}

pub fn op_mask(input: &InputDescriptor, concept: &str) -> Result<Mask, PrimError> {
    input
        .raster
        .channel_mask(concept)
        .ok_or_else(|| PrimError::UnknownConcept(concept.to_string()))
}

pub fn op_scalar_field(input: &InputDescriptor, field: &str) -> Result<f64, PrimError> {
    if !SCALAR_FIELDS.contains(&field) {
        return Err(PrimError::UnknownField(field.to_string()));
    }
    input
        .scalar_fields
        .get(field)
        .copied()
        .ok_or_else(|| PrimError::UnknownField(field.to_string()))
}

pub fn op_area_fraction(m: &Mask) -> f64 {
    m.count_ones() as f64 / m.len() as f64
}

/// Which metric the distance transform uses; Euclidean is exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceNorm {
    Euclidean,
    Chebyshev,
}

/// Distance in cell units to the nearest 1-cell. An all-zero mask yields a
/// grid filled with the sentinel `width + height`.
pub fn op_distance_transform(m: &Mask, norm: DistanceNorm) -> Grid {
    let sentinel = (m.width() + m.height()) as f64;
    if m.count_ones() == 0 {
        return Grid::filled(m.width(), m.height(), sentinel);
    }
    match norm {
        DistanceNorm::Euclidean => euclidean_distance_transform(m),
        DistanceNorm::Chebyshev => chebyshev_distance_transform(m),
    }
}

const EDT_INF: f64 = 1e20;

/// Exact squared Euclidean distance transform (two 1-D passes of the
/// lower-envelope-of-parabolas method), then a square root. Squared
/// distances stay integral so the result matches a brute-force nearest-set
/// scan bit for bit.
fn euclidean_distance_transform(m: &Mask) -> Grid {
    let (w, h) = (m.width() as usize, m.height() as usize);
    let mut field = vec![0.0f64; w * h];
    for (i, &c) in m.cells().iter().enumerate() {
        field[i] = if c == 1 { 0.0 } else { EDT_INF };
    }

    let mut column = vec![0.0f64; h];
    let mut out_col = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = field[y * w + x];
        }
        edt_1d(&column, &mut out_col);
        for y in 0..h {
            field[y * w + x] = out_col[y];
        }
    }

    let mut row_out = vec![0.0f64; w];
    for y in 0..h {
        edt_1d(&field[y * w..(y + 1) * w], &mut row_out);
        field[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }

    let cells = field.into_iter().map(f64::sqrt).collect();
    Grid::new(m.width(), m.height(), cells)
}

/// 1-D squared distance transform with a sampled function `f`.
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(d.len(), n);
    let mut hull_vertex = vec![0usize; n];
    let mut hull_break = vec![0.0f64; n + 1];
    let mut k = 0usize;
    hull_vertex[0] = 0;
    hull_break[0] = -EDT_INF;
    hull_break[1] = EDT_INF;

    let intersect = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };

    for q in 1..n {
        let mut s = intersect(q, hull_vertex[k]);
        while s <= hull_break[k] {
            k -= 1;
            s = intersect(q, hull_vertex[k]);
        }
        k += 1;
        hull_vertex[k] = q;
        hull_break[k] = s;
        hull_break[k + 1] = EDT_INF;
    }

    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while hull_break[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - hull_vertex[k] as f64;
        *out = dq * dq + f[hull_vertex[k]];
    }
}

/// Chebyshev distance via a two-pass chamfer scan; exact for the L∞ norm.
fn chebyshev_distance_transform(m: &Mask) -> Grid {
    let (w, h) = (m.width() as usize, m.height() as usize);
    let big = (w + h) as f64 * 2.0;
    let mut d = vec![0.0f64; w * h];
    for (i, &c) in m.cells().iter().enumerate() {
        d[i] = if c == 1 { 0.0 } else { big };
    }
    let idx = |x: usize, y: usize| y * w + x;
    for y in 0..h {
        for x in 0..w {
            let mut best = d[idx(x, y)];
            if x > 0 {
                best = best.min(d[idx(x - 1, y)] + 1.0);
            }
            if y > 0 {
                best = best.min(d[idx(x, y - 1)] + 1.0);
                if x > 0 {
                    best = best.min(d[idx(x - 1, y - 1)] + 1.0);
                }
                if x + 1 < w {
                    best = best.min(d[idx(x + 1, y - 1)] + 1.0);
                }
            }
            d[idx(x, y)] = best;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut best = d[idx(x, y)];
            if x + 1 < w {
                best = best.min(d[idx(x + 1, y)] + 1.0);
            }
            if y + 1 < h {
                best = best.min(d[idx(x, y + 1)] + 1.0);
                if x + 1 < w {
                    best = best.min(d[idx(x + 1, y + 1)] + 1.0);
                }
                if x > 0 {
                    best = best.min(d[idx(x - 1, y + 1)] + 1.0);
                }
            }
            d[idx(x, y)] = best;
        }
    }
    Grid::new(m.width(), m.height(), d)
}

fn mask_zip(a: &Mask, b: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Mask, PrimError> {
    check_dims((a.width(), a.height()), (b.width(), b.height()))?;
    let cells = a.cells().iter().zip(b.cells()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Mask::new(a.width(), a.height(), cells))
}

/// Dispatch one primitive call. Arguments are expected to match one of the
/// registered signatures; anything else is a `BadArgs` bug report.
pub fn dispatch(
    name: &str,
    args: &[Value],
    config: &RegistryConfig,
) -> Result<Value, PrimError> {
    match name {
        "mask" => match (&args[0], &args[1]) {
            (Value::Input(input), Value::Text(concept)) => {
                Ok(Value::Mask(op_mask(input, concept)?))
            }
            _ => Err(bad_args(name, args)),
        },
        "scalar_field" => match (&args[0], &args[1]) {
            (Value::Input(input), Value::Text(field)) => {
                Ok(Value::Scalar(op_scalar_field(input, field)?))
            }
            _ => Err(bad_args(name, args)),
        },
        "area_fraction" => match &args[0] {
            Value::Mask(m) => Ok(Value::Scalar(op_area_fraction(m))),
            _ => Err(bad_args(name, args)),
        },
        "distance_transform" => match &args[0] {
            Value::Mask(m) => Ok(Value::Grid(op_distance_transform(m, config.distance_norm))),
            _ => Err(bad_args(name, args)),
        },
        "add" => arith(name, args, |a, b| a + b),
        "sub" => arith(name, args, |a, b| a - b),
        "mul" => arith(name, args, |a, b| a * b),
        "div" => {
            let eps = config.div_epsilon;
            arith(name, args, move |a, b| guarded_div(a, b, eps))
        }
        "max" => match args {
            [Value::Grid(g)] => Ok(Value::Scalar(
                g.cells().iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )),
            [_, _] => arith(name, args, f64::max),
            _ => Err(bad_args(name, args)),
        },
        "min" => arith(name, args, f64::min),
        "mean" => match &args[0] {
            Value::Grid(g) => {
                Ok(Value::Scalar(g.cells().iter().sum::<f64>() / g.len() as f64))
            }
            _ => Err(bad_args(name, args)),
        },
        "sum" => match &args[0] {
            Value::Grid(g) => Ok(Value::Scalar(g.cells().iter().sum::<f64>())),
            _ => Err(bad_args(name, args)),
        },
        "log1p" => {
            let f = |x: f64| -> Result<f64, String> {
                if x < -1.0 {
                    Err(format!("log1p of {x} (argument below -1)"))
                } else {
                    Ok(x.ln_1p())
                }
            };
            match &args[0] {
                Value::Scalar(x) => Ok(Value::Scalar(f(*x).map_err(|d| domain(name, d))?)),
                Value::Grid(g) => Ok(Value::Grid(try_map_grid(name, g, f)?)),
                _ => Err(bad_args(name, args)),
            }
        }
        "sqrt" => {
            let f = |x: f64| -> Result<f64, String> {
                if x < 0.0 {
                    if x > -1e-9 {
                        Ok(0.0)
                    } else {
                        Err(format!("sqrt of negative {x}"))
                    }
                } else {
                    Ok(x.sqrt())
                }
            };
            match &args[0] {
                Value::Scalar(x) => Ok(Value::Scalar(f(*x).map_err(|d| domain(name, d))?)),
                Value::Grid(g) => Ok(Value::Grid(try_map_grid(name, g, f)?)),
                _ => Err(bad_args(name, args)),
            }
        }
        "negate" => match &args[0] {
            Value::Scalar(x) => Ok(Value::Scalar(-x)),
            Value::Grid(g) => Ok(Value::Grid(map_grid(g, |x| -x))),
            _ => Err(bad_args(name, args)),
        },
        "threshold" => match (&args[0], &args[1]) {
            (Value::Grid(g), Value::Scalar(t)) => {
                let cells = g.cells().iter().map(|&c| u8::from(c > *t)).collect();
                Ok(Value::Mask(Mask::new(g.width(), g.height(), cells)))
            }
            (Value::Scalar(a), Value::Scalar(b)) => Ok(Value::Bool(a > b)),
            _ => Err(bad_args(name, args)),
        },
        "and" => match (&args[0], &args[1]) {
            (Value::Mask(a), Value::Mask(b)) => Ok(Value::Mask(mask_zip(a, b, |x, y| x & y)?)),
            _ => Err(bad_args(name, args)),
        },
        "or" => match (&args[0], &args[1]) {
            (Value::Mask(a), Value::Mask(b)) => Ok(Value::Mask(mask_zip(a, b, |x, y| x | y)?)),
            _ => Err(bad_args(name, args)),
        },
        "not" => match &args[0] {
            Value::Mask(m) => {
                let cells = m.cells().iter().map(|&c| 1 - c).collect();
                Ok(Value::Mask(Mask::new(m.width(), m.height(), cells)))
            }
            _ => Err(bad_args(name, args)),
        },
        "where" => {
            let m = match &args[0] {
                Value::Mask(m) => m,
                _ => return Err(bad_args(name, args)),
            };
            let pick = |v: &Value, i: usize| -> Result<f64, PrimError> {
                match v {
                    Value::Scalar(s) => Ok(*s),
                    Value::Grid(g) => {
                        check_dims((m.width(), m.height()), (g.width(), g.height()))?;
                        Ok(g.cells()[i])
                    }
                    _ => Err(bad_args(name, args)),
                }
            };
            let mut cells = Vec::with_capacity(m.len());
            for (i, &c) in m.cells().iter().enumerate() {
                let v = if c == 1 {
                    pick(&args[1], i)?
                } else {
                    pick(&args[2], i)?
                };
                cells.push(v);
            }
            Ok(Value::Grid(Grid::new(m.width(), m.height(), cells)))
        }
        other => Err(PrimError::BadArgs {
            op: other.to_string(),
            found: "unregistered primitive reached dispatch".to_string(),
        }),
    }
}

/// Per-call work estimate used by the evaluator's step budget: grid and
/// mask operands (or results) cost their cell count, scalars cost 1.
pub fn call_cost(args: &[Value], result: &Value) -> u64 {
    let one = |v: &Value| -> u64 {
        match v {
            Value::Grid(g) => g.len() as u64,
            Value::Mask(m) => m.len() as u64,
            _ => 1,
        }
    };
    args.iter().map(one).chain(std::iter::once(one(result))).max().unwrap_or(1)
}

/// Kinds every overload of a primitive accepts, used by the type checker.
pub fn builtin_signatures(name: &str) -> Option<Vec<(Vec<Kind>, Kind)>> {
    use Kind::*;
    let pairwise = || {
        vec![
            (vec![Scalar, Scalar], Scalar),
            (vec![Grid, Grid], Grid),
            (vec![Grid, Scalar], Grid),
            (vec![Scalar, Grid], Grid),
        ]
    };
    let sigs = match name {
        "mask" => vec![(vec![Input, Text], Mask)],
        "scalar_field" => vec![(vec![Input, Text], Scalar)],
        "area_fraction" => vec![(vec![Mask], Scalar)],
        "distance_transform" => vec![(vec![Mask], Grid)],
        "add" | "sub" | "mul" | "div" | "min" => pairwise(),
        "max" => {
            let mut s = pairwise();
            s.push((vec![Grid], Scalar));
            s
        }
        "mean" | "sum" => vec![(vec![Grid], Scalar)],
        "log1p" | "sqrt" | "negate" => vec![(vec![Scalar], Scalar), (vec![Grid], Grid)],
        "threshold" => vec![(vec![Grid, Scalar], Mask), (vec![Scalar, Scalar], Bool)],
        "and" | "or" => vec![(vec![Mask, Mask], Mask)],
        "not" => vec![(vec![Mask], Mask)],
        "where" => vec![
            (vec![Mask, Grid, Grid], Grid),
            (vec![Mask, Grid, Scalar], Grid),
            (vec![Mask, Scalar, Grid], Grid),
            (vec![Mask, Scalar, Scalar], Grid),
        ],
        _ => return None,
    };
    Some(sigs)
}

pub fn builtin_description(name: &str) -> Option<&'static str> {
    let d = match name {
        "mask" => "mask(loc, concept) -> Mask: binary mask marking where the named land-use concept appears in the observation's imagery.",
        "scalar_field" => "scalar_field(loc, field) -> Scalar: look up an environmental scalar at the location; field is one of \"temperature\", \"precipitation\", \"nightlight\", \"elevation\".",
        "area_fraction" => "area_fraction(m) -> Scalar: fraction of cells set in the mask, between 0 and 1.",
        "distance_transform" => "distance_transform(m) -> Grid: per-cell distance (in cell units) to the nearest set cell of the mask.",
        "add" => "add(a, b): elementwise a + b over scalars and grids (also written a + b).",
        "sub" => "sub(a, b): elementwise a - b over scalars and grids (also written a - b).",
        "mul" => "mul(a, b): elementwise a * b over scalars and grids (also written a * b).",
        "div" => "div(a, b): elementwise a / b over scalars and grids with a guarded denominator (also written a / b).",
        "max" => "max(a, b): elementwise maximum over scalars and grids; max(g) with one grid argument reduces it to its largest cell.",
        "min" => "min(a, b): elementwise minimum over scalars and grids.",
        "mean" => "mean(g) -> Scalar: average of all grid cells.",
        "sum" => "sum(g) -> Scalar: sum of all grid cells.",
        "log1p" => "log1p(x): natural log of (1 + x) over scalars and grids; argument must stay above -1.",
        "sqrt" => "sqrt(x): square root over scalars and grids; argument must be non-negative.",
        "negate" => "negate(x): arithmetic negation over scalars and grids.",
        "threshold" => "threshold(g, t) -> Mask: cells of the grid strictly greater than t become 1; threshold(a, b) on scalars yields a boolean.",
        "and" => "and(a, b) -> Mask: cellwise logical AND of two masks.",
        "or" => "or(a, b) -> Mask: cellwise logical OR of two masks.",
        "not" => "not(m) -> Mask: cellwise logical complement of a mask.",
        "where" => "where(m, a, b) -> Grid: per cell, a where the mask is set, b elsewhere; a and b may be grids or scalars.",
        _ => return None,
    };
    Some(d)
}

pub const BUILTIN_NAMES: [&str; 20] = [
    "mask",
    "scalar_field",
    "area_fraction",
    "distance_transform",
    "add",
    "sub",
    "mul",
    "div",
    "max",
    "min",
    "mean",
    "sum",
    "log1p",
    "sqrt",
    "negate",
    "threshold",
    "and",
    "or",
    "not",
    "where",
];
