//! The desk-scale labeled image corpus and its split into disjoint tasks.
//!
//! Images are procedurally generated: each class has a distinct spatial
//! pattern and channel mix, with per-sample jitter and pixel noise. Pixels
//! live in [0, 1] and are used unnormalized as reconstruction targets.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::math::Scalar;
use crate::rng::{normal_f64, permutation, stream, uniform_f64, Prng};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<F> {
    pub pixels: Array3<F>,
    pub label: u32,
}

/// A borrowed training example with its label mapped into the global head
/// index space of seen classes.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, F> {
    pub image: &'a Array3<F>,
    pub label: u32,
}

#[derive(Debug, Clone)]
pub struct Corpus<F> {
    pub train: Vec<LabeledImage<F>>,
    pub test: Vec<LabeledImage<F>>,
    pub num_classes: usize,
}

fn class_pattern(class: u32, side: usize, rng: &mut Prng, x: usize, y: usize, jitter: &PatternJitter) -> f64 {
    let _ = rng;
    let s = side as f64;
    let fx = x as f64 / (s - 1.0);
    let fy = y as f64 / (s - 1.0);
    let tau = std::f64::consts::TAU;
    match class % 10 {
        0 => fx,
        1 => fy,
        2 => 0.5 + 0.5 * (tau * (jitter.freq * fy + jitter.phase)).sin(),
        3 => 0.5 + 0.5 * (tau * (jitter.freq * fx + jitter.phase)).sin(),
        4 => 0.5 + 0.5 * (tau * (jitter.freq * (fx + fy) / 2.0 + jitter.phase)).sin(),
        5 => {
            let a = (tau * (jitter.freq * fx + jitter.phase)).sin();
            let b = (tau * (jitter.freq * fy + jitter.phase)).sin();
            0.5 + 0.5 * a * b
        }
        6 => {
            let dx = fx - 0.5 - jitter.offset_x;
            let dy = fy - 0.5 - jitter.offset_y;
            let r = (dx * dx + dy * dy).sqrt();
            0.5 + 0.5 * (tau * jitter.freq * r + jitter.phase).cos()
        }
        7 => {
            let dx = fx - 0.5 - jitter.offset_x;
            let dy = fy - 0.5 - jitter.offset_y;
            (-(dx * dx + dy * dy) / 0.08).exp()
        }
        8 => {
            let qx = fx + jitter.offset_x > 0.5;
            let qy = fy + jitter.offset_y > 0.5;
            match (qx, qy) {
                (false, false) => 0.95,
                (true, true) => 0.7,
                (false, true) => 0.35,
                (true, false) => 0.1,
            }
        }
        _ => {
            let d = (fx - 0.5 - jitter.offset_x).abs() + (fy - 0.5 - jitter.offset_y).abs();
            0.5 + 0.5 * (tau * jitter.freq * d + jitter.phase).cos()
        }
    }
}

struct PatternJitter {
    freq: f64,
    phase: f64,
    offset_x: f64,
    offset_y: f64,
}

/// Per-class RGB emphasis so classes differ in color statistics too.
fn channel_mix(class: u32, channel: usize) -> f64 {
    0.35 + 0.65 * (((class as usize) * 7 + channel * 3 + 1) % 5) as f64 / 4.0
}

fn generate_image<F: Scalar>(
    class: u32,
    side: usize,
    channels: usize,
    rng: &mut Prng,
) -> LabeledImage<F> {
    let jitter = PatternJitter {
        freq: 2.0 * uniform_f64(rng, 0.9, 1.1),
        phase: uniform_f64(rng, 0.0, 1.0),
        offset_x: uniform_f64(rng, -0.08, 0.08),
        offset_y: uniform_f64(rng, -0.08, 0.08),
    };
    let amplitude = uniform_f64(rng, 0.8, 1.0);
    let mut pixels = Array3::zeros((channels, side, side));
    for y in 0..side {
        for x in 0..side {
            let p = class_pattern(class, side, rng, x, y, &jitter);
            for ch in 0..channels {
                let base = 0.1 + 0.8 * amplitude * channel_mix(class, ch) * p;
                let noisy = base + normal_f64(rng, 0.0, 0.03);
                pixels[[ch, y, x]] = F::of(noisy.clamp(0.0, 1.0));
            }
        }
    }
    LabeledImage {
        pixels,
        label: class,
    }
}

/// Deterministic procedural corpus; every image derives from
/// (seed, split, class, index).
pub fn synthetic_corpus<F: Scalar>(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    side: usize,
    channels: usize,
    seed: u64,
) -> Corpus<F> {
    let mut train = Vec::with_capacity(num_classes * train_per_class);
    let mut test = Vec::with_capacity(num_classes * test_per_class);
    for class in 0..num_classes as u32 {
        for i in 0..train_per_class {
            let mut rng = stream(seed, &[0, class as u64, i as u64]);
            train.push(generate_image(class, side, channels, &mut rng));
        }
        for i in 0..test_per_class {
            let mut rng = stream(seed, &[1, class as u64, i as u64]);
            test.push(generate_image(class, side, channels, &mut rng));
        }
    }
    Corpus {
        train,
        test,
        num_classes,
    }
}

/// One task of the class-incremental stream: a disjoint class set with its
/// train and test corpus indices.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    /// Raw dataset class ids owned by this task, in head-assignment order.
    pub classes: Vec<u32>,
    /// Indices into `corpus.train`.
    pub train: Vec<usize>,
    /// Indices into `corpus.test`.
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes per task (equal across tasks by construction).
    pub fn classes_per_task(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.classes.len())
    }
}

/// Shuffle the class universe and chunk it into `t` equal disjoint class sets.
pub fn split_tasks<F>(corpus: &Corpus<F>, t: usize, rng: &mut Prng) -> Result<TaskStream> {
    if t == 0 {
        return Err(Error::Config("need at least one task".into()));
    }
    if corpus.num_classes % t != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot split into {} equal tasks",
            corpus.num_classes, t
        )));
    }
    let per_task = corpus.num_classes / t;
    let order = permutation(rng, corpus.num_classes);
    let mut tasks = Vec::with_capacity(t);
    for chunk in order.chunks(per_task) {
        let classes: Vec<u32> = chunk.iter().map(|&c| c as u32).collect();
        let train = corpus
            .train
            .iter()
            .enumerate()
            .filter(|(_, img)| classes.contains(&img.label))
            .map(|(i, _)| i)
            .collect();
        let test = corpus
            .test
            .iter()
            .enumerate()
            .filter(|(_, img)| classes.contains(&img.label))
            .map(|(i, _)| i)
            .collect();
        tasks.push(TaskSpec {
            classes,
            train,
            test,
        });
    }
    Ok(TaskStream { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_bounded() {
        let a: Corpus<f32> = synthetic_corpus(4, 3, 2, 16, 3, 11);
        let b: Corpus<f32> = synthetic_corpus(4, 3, 2, 16, 3, 11);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.test.len(), 8);
        for img in &a.train {
            assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn classes_have_distinct_means() {
        let corpus: Corpus<f32> = synthetic_corpus(10, 4, 1, 32, 3, 5);
        let mut means = vec![0.0f64; 10];
        for img in &corpus.train {
            let m: f64 = img.pixels.iter().map(|&v| v as f64).sum::<f64>()
                / img.pixels.len() as f64;
            means[img.label as usize] += m / 4.0;
        }
        // patterns overlap in mean for some pairs; just require variety
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 0.05, "means {means:?}");
    }

    #[test]
    fn split_covers_universe_disjointly() {
        let corpus: Corpus<f32> = synthetic_corpus(200, 0, 0, 8, 1, 1);
        let stream_ = split_tasks(&corpus, 20, &mut stream(3, &[])).unwrap();
        assert_eq!(stream_.num_tasks(), 20);
        assert_eq!(stream_.classes_per_task(), 10);
        let mut all: Vec<u32> = stream_
            .tasks
            .iter()
            .flat_map(|t| t.classes.iter().cloned())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<u32>>());
    }

    #[test]
    fn single_task_holds_everything() {
        let corpus: Corpus<f32> = synthetic_corpus(6, 2, 1, 8, 1, 2);
        let stream_ = split_tasks(&corpus, 1, &mut stream(4, &[])).unwrap();
        assert_eq!(stream_.num_tasks(), 1);
        assert_eq!(stream_.tasks[0].classes.len(), 6);
        assert_eq!(stream_.tasks[0].train.len(), 12);
    }

    #[test]
    fn indivisible_class_count_is_config_error() {
        let corpus: Corpus<f32> = synthetic_corpus(10, 1, 1, 8, 1, 2);
        assert!(matches!(
            split_tasks(&corpus, 3, &mut stream(4, &[])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn task_train_indices_match_task_classes() {
        let corpus: Corpus<f32> = synthetic_corpus(8, 3, 2, 8, 1, 9);
        let stream_ = split_tasks(&corpus, 4, &mut stream(5, &[])).unwrap();
        for task in &stream_.tasks {
            for &i in &task.train {
                assert!(task.classes.contains(&corpus.train[i].label));
            }
            assert_eq!(task.train.len(), 6);
            assert_eq!(task.test.len(), 4);
        }
    }
}
