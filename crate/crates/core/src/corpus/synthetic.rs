//! Procedural pedestrian corpus.
//!
//! Each identity owns one value per attribute slot (gender, hair, upper
//! garment, lower garment, shoes). Images render the attributes as colour
//! blocks of a stick figure; captions name them through a handful of
//! sentence templates. Instances of one identity differ only by rendering
//! noise (shifts, boundary jitter, brightness, pixel noise).

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, ImageSource, Raster, RawEntry, Split, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const GENDERS: [&str; 4] = ["man", "woman", "boy", "girl"];
const COLORS: [(&str, [f32; 3]); 10] = [
    ("red", [0.85, 0.10, 0.10]),
    ("blue", [0.10, 0.20, 0.85]),
    ("green", [0.10, 0.70, 0.20]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("purple", [0.55, 0.10, 0.70]),
    ("orange", [1.00, 0.55, 0.00]),
    ("pink", [1.00, 0.60, 0.75]),
    ("brown", [0.50, 0.30, 0.10]),
];
const SLOTS: usize = 5;
const TEMPLATES: [&str; 4] = [
    "a {g} with {h} hair wearing a {u} shirt, {l} pants and {s} shoes.",
    "the {g} has {h} hair and wears a {u} top with {l} trousers and {s} shoes.",
    "this {g} is wearing {s} shoes, {l} pants and a {u} jacket, with {h} hair.",
    "{h} haired {g} in a {u} shirt and {l} pants, wearing {s} shoes.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    /// Distinct values of the gender slot, in 2..=4.
    pub gender_values: usize,
    /// Distinct colours of each colour slot, in 2..=10.
    pub color_values: usize,
    /// Rendering noise in [0, 1].
    pub noise: f32,
    /// The last `test_identities` identities go to the test split.
    pub test_identities: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_identities: 16,
            images_per_identity: 4,
            captions_per_image: 2,
            gender_values: 4,
            color_values: 8,
            noise: 0.3,
            test_identities: 0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn slot_sizes(&self) -> [usize; SLOTS] {
        [self.gender_values, self.color_values, self.color_values, self.color_values, self.color_values]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_identities == 0 || self.images_per_identity == 0 || self.captions_per_image == 0 {
            return bad("all counts must be at least 1");
        }
        if !(2..=GENDERS.len()).contains(&self.gender_values) || !(2..=COLORS.len()).contains(&self.color_values) {
            return bad("attribute vocabulary sizes out of range");
        }
        let capacity: usize = self.slot_sizes().iter().product();
        if self.n_identities > capacity {
            return bad("more identities than distinct attribute combinations");
        }
        if self.test_identities >= self.n_identities {
            return bad("test identities must leave at least one training identity");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Attribute values of identity `i`. Mixed-radix digits of `i` are prefix
/// summed modulo each slot size; the map is a bijection onto attribute tuples
/// and consecutive identities differ in every slot.
fn attributes(i: usize, sizes: &[usize; SLOTS]) -> [usize; SLOTS] {
    let mut digits = [0usize; SLOTS];
    let mut rest = i;
    for (d, &s) in digits.iter_mut().zip(sizes) {
        *d = rest % s;
        rest /= s;
    }
    let mut out = [0usize; SLOTS];
    let mut acc = 0;
    for k in 0..SLOTS {
        acc += digits[k];
        out[k] = acc % sizes[k];
    }
    out
}

/// Every word a caption can use to name an attribute.
pub fn attribute_lexicon() -> BTreeSet<&'static str> {
    GENDERS.iter().copied().chain(COLORS.iter().map(|c| c.0)).collect()
}

fn caption(attrs: &[usize; SLOTS], template: usize) -> String {
    TEMPLATES[template]
        .replace("{g}", GENDERS[attrs[0]])
        .replace("{h}", COLORS[attrs[1]].0)
        .replace("{u}", COLORS[attrs[2]].0)
        .replace("{l}", COLORS[attrs[3]].0)
        .replace("{s}", COLORS[attrs[4]].0)
}

fn render(attrs: &[usize; SLOTS], noise: f32, rng: &mut Rng) -> Raster {
    let (h, w) = (IMAGE_HEIGHT as i64, IMAGE_WIDTH as i64);
    let mut img = Raster::filled(IMAGE_HEIGHT, IMAGE_WIDTH, [0.5, 0.5, 0.5]);
    let shift = (noise * 20.0) as i64;
    let jitter = (noise * 16.0) as i64;
    let mut r = |span: i64| if span == 0 { 0 } else { rng.random_range(-span..=span) };
    let cx = w / 2 + r(shift);
    let top = r(shift);
    // gender sets the figure's width and height
    let (width, scale) = match attrs[0] {
        0 => (60, 1.0),
        1 => (46, 0.95),
        2 => (40, 0.8),
        _ => (34, 0.75),
    };
    let y = |v: f32| ((v * scale) as i64) + top + (h - (h as f32 * scale) as i64);
    let bounds = [y(20.0) + r(jitter), y(84.0) + r(jitter), y(206.0) + r(jitter), y(330.0) + r(jitter), y(364.0) + r(jitter)];
    let regions = [
        (bounds[0], bounds[1], width * 6 / 10, attrs[1]),
        (bounds[1], bounds[2], width, attrs[2]),
        (bounds[2], bounds[3], width * 8 / 10, attrs[3]),
        (bounds[3], bounds[4], width * 9 / 10, attrs[4]),
    ];
    for (y0, y1, half_w, color) in regions {
        let rgb = COLORS[color].1;
        for yy in y0.max(0)..y1.min(h) {
            for xx in (cx - half_w / 2).max(0)..(cx + half_w / 2).min(w) {
                img.set_pixel(yy as usize, xx as usize, rgb);
            }
        }
    }
    let brightness = 1.0 + noise * 0.3 * (rng.random::<f32>() * 2.0 - 1.0);
    let pixel_noise = Normal::new(0.0f32, (noise * 0.2).max(1e-6)).expect("valid std");
    for v in img.data.iter_mut() {
        *v = (*v * brightness + pixel_noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Builds a corpus from the spec; identical specs yield identical corpora.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let sizes = spec.slot_sizes();
    let n_train = spec.n_identities - spec.test_identities;
    let mut entries = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for id in 0..spec.n_identities {
        let attrs = attributes(id, &sizes);
        let split = if id < n_train { Split::Train } else { Split::Test };
        for img in 0..spec.images_per_identity {
            let mut rng = rng::stream(spec.seed, &[rng::tags::SYNTH, id as u64, img as u64]);
            let raster = render(&attrs, spec.noise, &mut rng);
            let captions = (0..spec.captions_per_image)
                .map(|_| caption(&attrs, rng.random_range(0..TEMPLATES.len())))
                .collect();
            entries.push(RawEntry {
                label: format!("{id:05}"),
                split,
                file_path: format!("images/{id:05}_{img:02}.png"),
                source: ImageSource::Raster(Arc::new(raster)),
                captions,
            });
        }
    }
    Corpus::from_entries(entries)
}
