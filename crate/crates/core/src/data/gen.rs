//! Synthetic grounded-VQA sample generation.
//!
//! Each sample places a few one-patch colored shapes on a black grid image
//! and asks a templated question whose answer is readable from the pixels
//! inside the annotated box union. A scripted response (point at the target
//! cells, then answer) is attached for supervised warm-up.

use super::vocab;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{special, ModelConfig, Segment, SegmentedSequence};
use crate::reward::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Question families, weighted in [`TaskConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionFamily {
    /// "what color is the <shape> ?" — the shape is unique in the image.
    ColorOf,
    /// "what shape is at <row> <col> ?"
    ShapeAt,
    /// "count of <color> ?" — counts matching objects (at least one).
    CountColor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length of one object in patches; objects sit on a span-aligned
    /// lattice so they never overlap.
    pub object_span: usize,
    /// Draw weights for [ColorOf, ShapeAt, CountColor].
    pub family_weights: [f64; 3],
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { min_objects: 2, max_objects: 4, object_span: 2, family_weights: [1.0, 1.0, 1.0] }
    }
}

impl TaskConfig {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if self.max_objects > vocab::SHAPES.len() {
            return Err(Error::Config(format!(
                "max_objects {} exceeds the {} distinct shapes",
                self.max_objects,
                vocab::SHAPES.len()
            )));
        }
        if self.object_span == 0
            || config.grid_rows % self.object_span != 0
            || config.grid_cols % self.object_span != 0
        {
            return Err(Error::Config(format!(
                "object_span {} must divide the {}x{} grid",
                self.object_span, config.grid_rows, config.grid_cols
            )));
        }
        let slots = (config.grid_rows / self.object_span) * (config.grid_cols / self.object_span);
        if self.max_objects > slots {
            return Err(Error::Config(format!(
                "max_objects {} exceeds the {} object slots",
                self.max_objects, slots
            )));
        }
        if config.grid_rows > vocab::GRID_COORDS || config.grid_cols > vocab::GRID_COORDS {
            return Err(Error::Config(format!(
                "grid larger than the {} coordinate tokens",
                vocab::GRID_COORDS
            )));
        }
        if self.family_weights.iter().any(|w| *w < 0.0) || self.family_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("family weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

/// One placed object: a shape of a color whose top-left patch cell is
/// `(row, col)` and which spans `span × span` patches.
#[derive(Debug, Clone, Copy)]
struct Placed {
    row: usize,
    col: usize,
    shape: usize,
    color: usize,
}

/// A grounded question/answer pair over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub id: u64,
    pub image: Image,
    /// Prompt token ids (question).
    pub question: Vec<usize>,
    /// Gold answer token ids.
    pub gold: Vec<usize>,
    /// Pixel regions that justify the answer.
    pub boxes: Vec<BoundingBox>,
    /// Scripted well-formatted response for supervised warm-up.
    pub warmup_response: Vec<usize>,
}

impl DataSample {
    /// `[visual block] + [question]` ready for generation.
    pub fn prompt_sequence(&self, config: &ModelConfig) -> SegmentedSequence {
        let nv = config.num_patches();
        let mut tokens = vec![special::IMG; nv];
        let mut segments = vec![Segment::Visual; nv];
        tokens.extend(&self.question);
        segments.extend(std::iter::repeat(Segment::Prompt).take(self.question.len()));
        SegmentedSequence::new(tokens, segments).expect("prompt layout is valid")
    }

    /// Prompt plus the scripted warm-up response, tagged like generation
    /// would tag it (think until the close-think token, then answer).
    pub fn warmup_sequence(&self, config: &ModelConfig) -> SegmentedSequence {
        let mut seq = self.prompt_sequence(config);
        for (tok, seg) in tag_response(&self.warmup_response) {
            seq.push(tok, seg);
        }
        seq
    }
}

/// Tags a raw response token list the way the sampler does: tokens are
/// `Think` until the close-think token (inclusive), then `Answer`.
pub fn tag_response(tokens: &[usize]) -> Vec<(usize, Segment)> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut in_answer = false;
    for &t in tokens {
        let seg = if in_answer { Segment::Answer } else { Segment::Think };
        out.push((t, seg));
        if t == special::THINK_CLOSE {
            in_answer = true;
        }
    }
    out
}

/// Splitmix64 finalizer; used to derive independent per-id seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn object_box(config: &ModelConfig, span: usize, row: usize, col: usize) -> BoundingBox {
    let p = config.patch_px;
    BoundingBox::new(col * p, row * p, (col + span) * p, (row + span) * p)
}

fn weighted_family(rng: &mut ChaCha8Rng, weights: &[f64; 3]) -> QuestionFamily {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw < 0.0 {
            return [QuestionFamily::ColorOf, QuestionFamily::ShapeAt, QuestionFamily::CountColor][i];
        }
    }
    QuestionFamily::CountColor
}

/// Deterministically builds the sample with the given id.
pub fn generate_sample(
    config: &ModelConfig,
    task: &TaskConfig,
    id: u64,
    master_seed: u64,
) -> Result<DataSample> {
    config.validate()?;
    task.validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, id));

    // Place distinct shapes on distinct lattice slots; colors may repeat.
    let span = task.object_span;
    let slot_cols = config.grid_cols / span;
    let n_objects = rng.random_range(task.min_objects..=task.max_objects);
    let mut slots: Vec<usize> = (0..(config.grid_rows / span) * slot_cols).collect();
    let mut shapes: Vec<usize> = (0..vocab::SHAPES.len()).collect();
    shuffle(&mut slots, &mut rng);
    shuffle(&mut shapes, &mut rng);
    let mut objects = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        objects.push(Placed {
            row: (slots[i] / slot_cols) * span,
            col: (slots[i] % slot_cols) * span,
            shape: shapes[i],
            color: rng.random_range(0..vocab::COLORS.len()),
        });
    }

    let mut image = Image::blank(config.image_width(), config.image_height());
    let side = span * config.patch_px;
    for obj in &objects {
        let mask = vocab::shape_mask(obj.shape, side);
        let rgb = vocab::color_rgb(obj.color);
        for py in 0..side {
            for px in 0..side {
                if mask[py * side + px] {
                    image.set_pixel(obj.col * config.patch_px + px, obj.row * config.patch_px + py, rgb);
                }
            }
        }
    }

    let w = |word: &str| vocab::template_token(word);
    let family = weighted_family(&mut rng, &task.family_weights);
    let (question, gold, boxes, pointed): (Vec<usize>, Vec<usize>, Vec<BoundingBox>, Vec<(usize, usize)>) =
        match family {
            QuestionFamily::ColorOf => {
                let obj = objects[rng.random_range(0..objects.len())];
                (
                    vec![w("what"), w("color"), w("is"), w("the"), vocab::shape_token(obj.shape), w("?")],
                    vec![vocab::color_token(obj.color)],
                    vec![object_box(config, span, obj.row, obj.col)],
                    vec![(obj.row, obj.col)],
                )
            }
            QuestionFamily::ShapeAt => {
                let obj = objects[rng.random_range(0..objects.len())];
                (
                    vec![
                        w("what"),
                        w("shape"),
                        w("at"),
                        vocab::row_token(obj.row),
                        vocab::col_token(obj.col),
                        w("?"),
                    ],
                    vec![vocab::shape_token(obj.shape)],
                    vec![object_box(config, span, obj.row, obj.col)],
                    vec![(obj.row, obj.col)],
                )
            }
            QuestionFamily::CountColor => {
                let color = objects[rng.random_range(0..objects.len())].color;
                let mut matching: Vec<&Placed> = objects.iter().filter(|o| o.color == color).collect();
                matching.sort_by_key(|o| (o.row, o.col));
                (
                    vec![w("count"), w("of"), vocab::color_token(color), w("?")],
                    vec![vocab::count_token(matching.len())],
                    matching.iter().map(|o| object_box(config, span, o.row, o.col)).collect(),
                    matching.iter().map(|o| (o.row, o.col)).collect(),
                )
            }
        };

    let mut warmup_response = vec![special::THINK_OPEN, w("look")];
    for (r, c) in &pointed {
        warmup_response.push(vocab::row_token(*r));
        warmup_response.push(vocab::col_token(*c));
    }
    warmup_response.push(special::THINK_CLOSE);
    warmup_response.extend(&gold);
    warmup_response.push(special::EOS);

    Ok(DataSample { id, image, question, gold, boxes, warmup_response })
}

/// Fisher-Yates with the sample's own stream.
fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
