//! Seeded program generators: a plausible-hypothesis generator used by the
//! scripted backend's objective sampling, and a grammar-stress generator
//! for parser/printer round-trip properties.

use rand::Rng;

use super::ast::{BinOp, Binding, Expr, FeatureProgram, NamedExpr};

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub concepts: Vec<String>,
    pub min_features: usize,
    pub max_features: usize,
    /// Chance a feature is an environmental scalar instead of a mask aggregate.
    pub scalar_field_prob: f64,
    /// Chance a feature composes two simpler scalar expressions.
    pub compose_prob: f64,
    /// Chance a feature picks up a multiplicative constant.
    pub constant_prob: f64,
    /// Chance of one extra unused binding (keeps the dead-code pass honest).
    pub dead_binding_prob: f64,
    /// Emit exactly one feature that is a full predictor with coefficients.
    pub single_feature: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            concepts: vec![
                "residential".into(),
                "road".into(),
                "water".into(),
                "forest".into(),
                "farmland".into(),
                "commercial".into(),
            ],
            min_features: 1,
            max_features: 3,
            scalar_field_prob: 0.06,
            compose_prob: 0.3,
            constant_prob: 0.15,
            dead_binding_prob: 0.1,
            single_feature: false,
        }
    }
}

const FIELDS: [&str; 4] = ["temperature", "precipitation", "nightlight", "elevation"];

/// A kind-correct candidate hypothesis over the standard registry.
pub fn random_program(rng: &mut impl Rng, cfg: &GeneratorConfig) -> FeatureProgram {
    let mut builder = Builder {
        bindings: Vec::new(),
        next_id: 0,
    };
    let n_features = if cfg.single_feature {
        1
    } else {
        rng.gen_range(cfg.min_features..=cfg.max_features)
    };

    let mut features: Vec<NamedExpr> = Vec::new();
    for _ in 0..n_features {
        let (name, expr) = if cfg.single_feature {
            let expr = predictor_expr(rng, cfg, &mut builder);
            ("prediction".to_string(), expr)
        } else {
            scalar_feature(rng, cfg, &mut builder)
        };
        let name = uniquify(name, &features);
        features.push(NamedExpr { name, expr });
    }

    if rng.gen_bool(cfg.dead_binding_prob) {
        let concept = pick(rng, &cfg.concepts).to_string();
        let name = builder.fresh("unused");
        builder.bindings.push(Binding {
            name,
            expr: Expr::call("mask", vec![Expr::var("loc"), Expr::Text(concept)]),
        });
    }

    let program = FeatureProgram {
        name: "estimate".to_string(),
        param: "loc".to_string(),
        bindings: builder.bindings,
        features,
    };
    debug_assert!(program.validate().is_ok());
    program
}

struct Builder {
    bindings: Vec<Binding>,
    next_id: usize,
}

impl Builder {
    fn fresh(&mut self, stem: &str) -> String {
        self.next_id += 1;
        format!("{stem}_{}", self.next_id)
    }

    /// Bind a mask expression once and reuse the variable afterwards.
    fn mask_var(&mut self, concept: &str, rng: &mut impl Rng) -> Expr {
        let stem = concept
            .chars()
            .take(4)
            .collect::<String>();
        // reuse an existing binding for the same concept most of the time
        if rng.gen_bool(0.8) {
            if let Some(b) = self.bindings.iter().find(|b| {
                matches!(&b.expr, Expr::Call { name, args } if name == "mask"
                    && matches!(&args[1], Expr::Text(t) if t == concept))
            }) {
                return Expr::var(&b.name);
            }
        }
        let name = self.fresh(&format!("m_{stem}"));
        self.bindings.push(Binding {
            name: name.clone(),
            expr: Expr::call(
                "mask",
                vec![Expr::var("loc"), Expr::Text(concept.to_string())],
            ),
        });
        Expr::var(name)
    }
}

fn pick<'a, T>(rng: &mut impl Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.gen_range(0..xs.len())]
}

fn uniquify(base: String, existing: &[NamedExpr]) -> String {
    if !existing.iter().any(|f| f.name == base) {
        return base;
    }
    let mut i = 2;
    loop {
        let candidate = format!("{base}_{i}");
        if !existing.iter().any(|f| f.name == candidate) {
            return candidate;
        }
        i += 1;
    }
}

/// One named scalar feature over masks, distances, or scalar fields.
fn scalar_feature(
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
    builder: &mut Builder,
) -> (String, Expr) {
    if rng.gen_bool(cfg.compose_prob) {
        let (n1, e1) = simple_feature(rng, cfg, builder);
        let (n2, e2) = simple_feature(rng, cfg, builder);
        let op = *pick(rng, &[BinOp::Mul, BinOp::Add, BinOp::Sub]);
        let name = format!("{n1}_{}_{n2}", op.primitive_name());
        let expr = Expr::binary(op, e1, e2);
        return maybe_scaled(rng, cfg, name, expr);
    }
    let (name, expr) = simple_feature(rng, cfg, builder);
    maybe_scaled(rng, cfg, name, expr)
}

fn maybe_scaled(
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
    name: String,
    expr: Expr,
) -> (String, Expr) {
    if rng.gen_bool(cfg.constant_prob) {
        let c = round3((rng.gen::<f64>() * 2.0 - 1.0).exp() * 2.0);
        (name, Expr::binary(BinOp::Mul, Expr::Number(c), expr))
    } else {
        (name, expr)
    }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// One named scalar aggregate over a (possibly combined) concept mask,
/// a distance field, or an environmental scalar. The hypothesis space is
/// deliberately wide — many shapes, mask combinations, and continuous
/// threshold parameters — so no single sample is likely to contain the
/// few decisive features and search has to assemble them.
fn simple_feature(
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
    builder: &mut Builder,
) -> (String, Expr) {
    if rng.gen_bool(cfg.scalar_field_prob) {
        let field = *pick(rng, &FIELDS);
        let base = Expr::call(
            "scalar_field",
            vec![Expr::var("loc"), Expr::Text(field.to_string())],
        );
        return if field != "temperature" && rng.gen_bool(0.4) {
            (format!("log_{field}"), Expr::call("log1p", vec![base]))
        } else {
            (field.to_string(), base)
        };
    }

    let (stem, mask) = masked_expr(rng, cfg, builder);
    let af = || Expr::call("area_fraction", vec![mask.clone()]);
    let dt = || Expr::call("distance_transform", vec![mask.clone()]);
    let mean_dt = || Expr::call("mean", vec![dt()]);
    // area-fraction shapes dominate; distance aggregates are the rare,
    // decisive hypotheses search has to dig for
    let shape = {
        let r: f64 = rng.gen();
        if r < 0.42 {
            rng.gen_range(0..3)
        } else if r < 0.435 {
            rng.gen_range(3..6)
        } else {
            rng.gen_range(6..13)
        }
    };
    match shape {
        0 => (format!("{stem}_frac"), af()),
        1 => (format!("log_{stem}_frac"), Expr::call("log1p", vec![af()])),
        2 => (format!("sqrt_{stem}_frac"), Expr::call("sqrt", vec![af()])),
        3 => (format!("{stem}_dist_mean"), mean_dt()),
        4 => (
            format!("log_{stem}_dist_mean"),
            Expr::call("log1p", vec![mean_dt()]),
        ),
        5 => (
            format!("sqrt_{stem}_dist_mean"),
            Expr::call("sqrt", vec![mean_dt()]),
        ),
        6 => (format!("{stem}_dist_max"), Expr::call("max", vec![dt()])),
        7 => {
            // fraction of the tile within distance c of the concept
            let c = round3(rng.gen_range(1.0..8.0));
            (
                format!("near_{stem}_frac"),
                Expr::call(
                    "area_fraction",
                    vec![Expr::call(
                        "not",
                        vec![Expr::call("threshold", vec![dt(), Expr::Number(c)])],
                    )],
                ),
            )
        }
        8 => {
            let c = round3(rng.gen_range(0.5..4.0));
            (
                format!("{stem}_dist_row"),
                Expr::call(
                    "mean",
                    vec![Expr::call(
                        "min",
                        vec![dt(), Expr::Number(c)],
                    )],
                ),
            )
        }
        9 => {
            // distance seen from inside another concept's footprint
            let (other_stem, other) = masked_expr(rng, cfg, builder);
            (
                format!("{other_stem}_to_{stem}_dist"),
                Expr::call(
                    "mean",
                    vec![Expr::call(
                        "where",
                        vec![other, dt(), Expr::Number(0.0)],
                    )],
                ),
            )
        }
        10 => (
            format!("far_{stem}_dist_mean"),
            Expr::call(
                "mean",
                vec![Expr::call(
                    "distance_transform",
                    vec![Expr::call("not", vec![mask.clone()])],
                )],
            ),
        ),
        11 => {
            let c = round3(rng.gen_range(0.05..0.6));
            (
                format!("{stem}_gt"),
                Expr::binary(
                    BinOp::Sub,
                    af(),
                    Expr::Number(c),
                ),
            )
        }
        _ => (
            format!("inv_{stem}_dist"),
            Expr::binary(
                BinOp::Div,
                Expr::Number(1.0),
                Expr::binary(BinOp::Add, mean_dt(), Expr::Number(1.0)),
            ),
        ),
    }
}

/// Concept mask, sometimes a two-concept combination or a complement.
fn masked_expr(
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
    builder: &mut Builder,
) -> (String, Expr) {
    let concept = pick(rng, &cfg.concepts).clone();
    let base = builder.mask_var(&concept, rng);
    if rng.gen_bool(0.25) && cfg.concepts.len() > 1 {
        let other = pick(rng, &cfg.concepts).clone();
        let second = builder.mask_var(&other, rng);
        let op = if rng.gen_bool(0.5) { "and" } else { "or" };
        (
            format!("{concept}_{op}_{other}"),
            Expr::call(op, vec![base, second]),
        )
    } else if rng.gen_bool(0.08) {
        (format!("non_{concept}"), Expr::call("not", vec![base]))
    } else {
        (concept, base)
    }
}

/// Single-feature mode: the program IS the predictor, coefficients included.
fn predictor_expr(rng: &mut impl Rng, cfg: &GeneratorConfig, builder: &mut Builder) -> Expr {
    let terms = rng.gen_range(1..=3);
    let mut expr = Expr::Number(round3(rng.gen_range(-1.0..3.0)));
    for _ in 0..terms {
        let (_, term) = simple_feature(rng, cfg, builder);
        let coeff = round3((rng.gen::<f64>() * 2.0 - 1.0).exp() * 1.5);
        expr = Expr::binary(
            BinOp::Add,
            expr,
            Expr::binary(BinOp::Mul, Expr::Number(coeff), term),
        );
    }
    expr
}

/// One standalone feature with the bindings it needs, against a `loc`
/// parameter. The crossover recombiner splices these in as occasional
/// fresh genetic material.
pub fn random_feature(
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
) -> (Vec<Binding>, NamedExpr) {
    let mut builder = Builder {
        bindings: Vec::new(),
        next_id: 0,
    };
    let (name, expr) = scalar_feature(rng, cfg, &mut builder);
    (builder.bindings, NamedExpr { name, expr })
}

/// Grammar-stress generator: arbitrary identifiers, call names, string
/// contents, and literal magnitudes. Scope-correct so it always parses
/// back, but it does not promise to typecheck.
pub fn arbitrary_program(rng: &mut impl Rng) -> FeatureProgram {
    let param = random_ident(rng);
    let mut bound = vec![param.clone()];
    let mut bindings = Vec::new();
    for _ in 0..rng.gen_range(0..5) {
        let mut name = random_ident(rng);
        while bound.contains(&name) {
            name = random_ident(rng);
        }
        let expr = random_expr(rng, &bound, 3);
        bound.push(name.clone());
        bindings.push(Binding { name, expr });
    }
    let mut features = Vec::new();
    for i in 0..rng.gen_range(1..4) {
        let name = format!("{}_{i}", random_string(rng));
        let expr = random_expr(rng, &bound, 3);
        features.push(NamedExpr { name, expr });
    }
    let program = FeatureProgram {
        name: random_ident(rng),
        param,
        bindings,
        features,
    };
    debug_assert!(program.validate().is_ok(), "{program:?}");
    program
}

fn random_ident(rng: &mut impl Rng) -> String {
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    let len = rng.gen_range(1..6);
    let mut s = String::new();
    s.push(letters[rng.gen_range(0..letters.len())] as char);
    for _ in 1..len {
        let c = if rng.gen_bool(0.2) {
            b'_' as char
        } else if rng.gen_bool(0.2) {
            char::from(b'0' + rng.gen_range(0..10))
        } else {
            letters[rng.gen_range(0..letters.len())] as char
        };
        s.push(c);
    }
    if s == "def" || s == "return" {
        s.push('x');
    }
    s
}

fn random_string(rng: &mut impl Rng) -> String {
    let pool = ["road", "wa ter", "a\"b", "x\\y", "Σ-tile", "plain"];
    (*pick(rng, &pool)).to_string()
}

fn random_number(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..7) {
        0 => 0.0,
        1 => rng.gen_range(-5i32..6) as f64,
        2 => rng.gen_range(-1.0..1.0),
        3 => 1e-6,
        4 => 2.5e10,
        5 => -((rng.gen::<f64>() * 10.0).exp()),
        _ => rng.gen::<f64>() * 1e3,
    }
}

fn random_expr(rng: &mut impl Rng, bound: &[String], depth: usize) -> Expr {
    if depth == 0 || rng.gen_bool(0.4) {
        return match rng.gen_range(0..4) {
            0 => Expr::Number(random_number(rng)),
            1 => Expr::Text(random_string(rng)),
            2 => Expr::var(pick(rng, bound).clone()),
            _ => Expr::call(random_ident(rng), vec![]),
        };
    }
    match rng.gen_range(0..3) {
        0 => {
            let n_args = rng.gen_range(0..3);
            let args = (0..n_args)
                .map(|_| random_expr(rng, bound, depth - 1))
                .collect();
            Expr::call(random_ident(rng), args)
        }
        1 => {
            let op = *pick(rng, &[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div]);
            Expr::binary(
                op,
                random_expr(rng, bound, depth - 1),
                random_expr(rng, bound, depth - 1),
            )
        }
        _ => Expr::neg(random_expr(rng, bound, depth - 1)),
    }
}
