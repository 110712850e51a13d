//! Procedural benchmark worlds: seeded concept rasters, environmental
//! scalar fields, and targets produced by a hidden program plus noise.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsl::{self, EvalLimits, Evaluator, FeatureProgram};
use crate::fitness::MetricId;
use crate::primitives::{InputDescriptor, PrimitiveRegistry};
use crate::raster::Raster;

use super::{DataError, Observation, ObservationSet};

pub const DEFAULT_VOCABULARY: [&str; 6] = [
    "residential",
    "road",
    "water",
    "forest",
    "farmland",
    "commercial",
];

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub seed: u64,
    pub n_obs: usize,
    pub tile_size: u32,
    pub hidden_program: FeatureProgram,
    pub noise_sigma: f64,
    pub vocabulary: Vec<String>,
    pub target_name: String,
    pub metric_id: MetricId,
    pub lon_range: (f64, f64),
    pub lat_range: (f64, f64),
}

impl SynthParams {
    pub fn new(
        seed: u64,
        n_obs: usize,
        tile_size: u32,
        hidden_program: FeatureProgram,
        noise_sigma: f64,
    ) -> Self {
        SynthParams {
            seed,
            n_obs,
            tile_size,
            hidden_program,
            noise_sigma,
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            target_name: "synthetic target".to_string(),
            metric_id: MetricId::Rmse,
            lon_range: (-120.0, -70.0),
            lat_range: (25.0, 49.0),
        }
    }
}

/// Scalar-field formulas, exposed so tests can recompute them from the
/// written rasters and coordinates.
pub mod fields {
    pub fn temperature(elevation: f64, lat: f64, lat_min: f64) -> f64 {
        27.0 - 0.0065 * elevation - 0.45 * (lat - lat_min)
    }

    pub fn precipitation(water_fraction: f64, elevation: f64) -> f64 {
        250.0 + 1800.0 * water_fraction + 0.1 * elevation
    }

    pub fn nightlight(residential_fraction: f64, road_fraction: f64) -> f64 {
        60.0 * residential_fraction + 20.0 * road_fraction
    }
}

/// Generate a fully reproducible observation set: the same parameters give
/// bit-identical rasters, fields, and targets. Targets are the hidden
/// program's features summed (a unit linear head) plus Gaussian noise.
pub fn generate_synthetic_world(params: &SynthParams) -> Result<ObservationSet, DataError> {
    let registry = PrimitiveRegistry::standard();
    if let Err(errors) = dsl::typecheck(&params.hidden_program, &registry) {
        return Err(DataError::InvalidHiddenProgram(format!(
            "hidden program does not typecheck: {}",
            errors
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    if params.n_obs < 10 {
        return Err(DataError::TooFewObservations {
            found: params.n_obs,
            need: 10,
        });
    }

    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let obs_seeds: Vec<u64> = (0..params.n_obs).map(|_| master.gen()).collect();

    let evaluator = Evaluator::new(
        &params.hidden_program,
        &registry,
        None,
        EvalLimits::default(),
    );

    let mut observations = Vec::with_capacity(params.n_obs);
    for (i, &obs_seed) in obs_seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(obs_seed);
        let id = format!("obs_{i:04}");
        let lon = rng.gen_range(params.lon_range.0..params.lon_range.1);
        let lat = rng.gen_range(params.lat_range.0..params.lat_range.1);

        let mut raster = Raster::new(params.tile_size, params.tile_size);
        for concept in &params.vocabulary {
            let cells = render_concept(&mut rng, concept, params.tile_size);
            raster.push_channel(concept, cells);
        }
        let raster = Arc::new(raster);

        let fractions = raster.channel_fractions();
        let frac = |name: &str| fractions.get(name).copied().unwrap_or(0.0);
        let elevation = rng.gen_range(0.0..3000.0);
        let mut scalar_fields = BTreeMap::new();
        scalar_fields.insert("elevation".to_string(), elevation);
        scalar_fields.insert(
            "temperature".to_string(),
            fields::temperature(elevation, lat, params.lat_range.0),
        );
        scalar_fields.insert(
            "precipitation".to_string(),
            fields::precipitation(frac("water"), elevation),
        );
        scalar_fields.insert(
            "nightlight".to_string(),
            fields::nightlight(frac("residential"), frac("road")),
        );

        let input = InputDescriptor::new(id, lon, lat, raster, scalar_fields)
            .expect("generated coordinates in range");

        let features = evaluator.eval(&input).map_err(|e| {
            DataError::InvalidHiddenProgram(format!(
                "hidden program failed on {}: {e}",
                input.id
            ))
        })?;
        let clean: f64 = features.iter().sum();
        let noise = if params.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, params.noise_sigma).expect("positive sigma");
            normal.sample(&mut rng)
        } else {
            0.0
        };
        observations.push(Observation {
            input: Arc::new(input),
            target: clean + noise,
        });
    }

    let set = ObservationSet {
        observations,
        target_name: params.target_name.clone(),
        metric_id: params.metric_id,
        vocabulary: params.vocabulary.clone(),
        manifest_path: None,
    };
    set.validate()?;
    Ok(set)
}

/// Concept layers are unions of a few seeded shapes; roads are strips,
/// water prefers half-planes, everything else mixes blobs and rectangles.
fn render_concept(rng: &mut ChaCha8Rng, concept: &str, size: u32) -> Vec<u8> {
    let n = size as usize;
    let mut cells = vec![0u8; n * n];
    match concept {
        "road" => {
            for _ in 0..rng.gen_range(1..=3) {
                draw_strip(rng, &mut cells, n);
            }
        }
        "water" => {
            if rng.gen_bool(0.15) {
                // dry tile
            } else if rng.gen_bool(0.5) {
                draw_half_plane(rng, &mut cells, n);
            } else {
                draw_ellipse(rng, &mut cells, n, 0.12, 0.45);
            }
        }
        _ => {
            if rng.gen_bool(0.18) {
                // concept absent from this tile
            } else {
                for _ in 0..rng.gen_range(1..=3) {
                    if rng.gen_bool(0.5) {
                        draw_rect(rng, &mut cells, n);
                    } else {
                        draw_ellipse(rng, &mut cells, n, 0.06, 0.3);
                    }
                }
            }
        }
    }
    cells
}

fn draw_strip(rng: &mut ChaCha8Rng, cells: &mut [u8], n: usize) {
    let width = rng.gen_range(1..=3);
    let vertical = rng.gen_bool(0.5);
    let pos = rng.gen_range(0..n);
    let slope: i64 = rng.gen_range(-1..=1);
    for t in 0..n {
        let offset = (pos as i64 + slope * t as i64 / 4).rem_euclid(n as i64) as usize;
        for w in 0..width {
            let p = (offset + w) % n;
            let (x, y) = if vertical { (p, t) } else { (t, p) };
            cells[y * n + x] = 1;
        }
    }
}

fn draw_half_plane(rng: &mut ChaCha8Rng, cells: &mut [u8], n: usize) {
    let side = rng.gen_range(0..4);
    let cut = rng.gen_range(n / 5..(4 * n) / 5);
    for y in 0..n {
        for x in 0..n {
            let inside = match side {
                0 => x < cut,
                1 => x >= cut,
                2 => y < cut,
                _ => y >= cut,
            };
            if inside {
                cells[y * n + x] = 1;
            }
        }
    }
}

fn draw_rect(rng: &mut ChaCha8Rng, cells: &mut [u8], n: usize) {
    let w = rng.gen_range(n / 8..=n / 2).max(1);
    let h = rng.gen_range(n / 8..=n / 2).max(1);
    let x0 = rng.gen_range(0..n);
    let y0 = rng.gen_range(0..n);
    for y in y0..(y0 + h).min(n) {
        for x in x0..(x0 + w).min(n) {
            cells[y * n + x] = 1;
        }
    }
}

fn draw_ellipse(rng: &mut ChaCha8Rng, cells: &mut [u8], n: usize, min_r: f64, max_r: f64) {
    let cx = rng.gen_range(0.0..n as f64);
    let cy = rng.gen_range(0.0..n as f64);
    let rx = rng.gen_range(min_r..max_r) * n as f64;
    let ry = rng.gen_range(min_r..max_r) * n as f64;
    for y in 0..n {
        for x in 0..n {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                cells[y * n + x] = 1;
            }
        }
    }
}

// ---------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    DensitySynthetic,
    PovertySynthetic,
    AgbSynthetic,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Preset> {
        match name {
            "density-synthetic" => Some(Preset::DensitySynthetic),
            "poverty-synthetic" => Some(Preset::PovertySynthetic),
            "agb-synthetic" => Some(Preset::AgbSynthetic),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::DensitySynthetic => "density-synthetic",
            Preset::PovertySynthetic => "poverty-synthetic",
            Preset::AgbSynthetic => "agb-synthetic",
        }
    }

    fn hidden_source(&self) -> &'static str {
        match self {
            Preset::DensitySynthetic => {
                "def hidden(loc):\n    return [(\"density\", 2.0 * area_fraction(mask(loc, \"residential\")) + 0.7 * log1p(mean(distance_transform(mask(loc, \"road\")))))]\n"
            }
            Preset::PovertySynthetic => {
                "def hidden(loc):\n    return [(\"wealth\", 1.5 * log1p(scalar_field(loc, \"nightlight\")) - 2.0 * area_fraction(mask(loc, \"farmland\")) + 0.8 * area_fraction(mask(loc, \"commercial\")))]\n"
            }
            Preset::AgbSynthetic => {
                "def hidden(loc):\n    return [(\"agb\", 60.0 * area_fraction(mask(loc, \"forest\")) + 0.01 * scalar_field(loc, \"precipitation\"))]\n"
            }
        }
    }

    pub fn params(&self, seed: u64, n_obs: usize) -> SynthParams {
        let hidden = dsl::parse(self.hidden_source()).expect("preset hidden program parses");
        let (sigma, tile, target_name, metric) = match self {
            Preset::DensitySynthetic => (0.01, 64, "population density", MetricId::Rmse),
            Preset::PovertySynthetic => (0.05, 64, "wealth asset index", MetricId::Rmse),
            Preset::AgbSynthetic => (0.5, 64, "aboveground biomass", MetricId::L1),
        };
        let mut p = SynthParams::new(seed, n_obs, tile, hidden, sigma);
        p.target_name = target_name.to_string();
        p.metric_id = metric;
        p
    }
}
