//! Differentiable image scorers.
//!
//! A scorer maps a rendered image to a scalar loss and its gradient with
//! respect to the pixels. The built-in scorers compare against a reference
//! image; [`RemoteScorer`] delegates to a text-alignment service over the
//! wire protocol in [`protocol`].

pub mod protocol;
mod remote;

pub use remote::RemoteScorer;

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{render, CameraPose, RenderConfig};
use crate::tf::TfRealized;
use crate::volume::ScalarField;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptSet {
    pub positive: String,
    pub user_negatives: Vec<String>,
    pub pool_negatives: Vec<String>,
}

impl PromptSet {
    /// Sampled pool negatives followed by the user's own.
    pub fn negatives(&self) -> Vec<String> {
        self.pool_negatives.iter().chain(&self.user_negatives).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    pub loss: f64,
    pub dloss_dimage: Image,
    pub logits: Option<Vec<f64>>,
}

impl ScoreResult {
    pub fn validate(&self, image: &Image) -> Result<()> {
        if !self.dloss_dimage.same_shape(image) {
            return Err(Error::Scorer("gradient shape does not match the image".into()));
        }
        if !self.loss.is_finite() || !self.dloss_dimage.is_finite() {
            return Err(Error::NonFinite("scorer loss or gradient".into()));
        }
        Ok(())
    }
}

/// What a scorer knows about the view being scored.
#[derive(Debug, Clone, Copy)]
pub struct ViewContext<'a> {
    pub step: usize,
    pub view: usize,
    pub pose: CameraPose,
    pub background: &'a Image,
    pub prompts: &'a PromptSet,
}

pub trait Scorer {
    fn score(&mut self, view: &ViewContext<'_>, image: &Image) -> Result<ScoreResult>;

    fn describe(&self) -> String;
}

/// Mean squared error against `reference`.
pub fn score_reference(image: &Image, reference: &Image) -> Result<ScoreResult> {
    if !image.same_shape(reference) {
        return Err(Error::invalid(format!(
            "image is {}x{}, reference is {}x{}",
            image.width(),
            image.height(),
            reference.width(),
            reference.height()
        )));
    }
    let n = image.data().len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = image
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(ScoreResult {
        loss: loss / n,
        dloss_dimage: Image::from_vec(image.width(), image.height(), grad)?,
        logits: None,
    })
}

/// Compares every view against one fixed image.
#[derive(Debug, Clone)]
pub struct ImageReferenceScorer {
    pub reference: Image,
}

impl Scorer for ImageReferenceScorer {
    fn score(&mut self, _view: &ViewContext<'_>, image: &Image) -> Result<ScoreResult> {
        score_reference(image, &self.reference)
    }

    fn describe(&self) -> String {
        "reference-image".into()
    }
}

/// Renders a known transfer function at each view's pose and background and
/// scores by MSE against it.
#[derive(Debug, Clone)]
pub struct ReferenceTfScorer<'a> {
    field: &'a ScalarField,
    reference: TfRealized,
    config: RenderConfig,
}

impl<'a> ReferenceTfScorer<'a> {
    pub fn new(field: &'a ScalarField, reference: TfRealized, config: RenderConfig) -> Self {
        ReferenceTfScorer { field, reference, config }
    }

    pub fn reference_image(&self, pose: &CameraPose, background: &Image) -> Result<Image> {
        Ok(render(self.field, &self.reference, pose, &self.config, background)?.image)
    }
}

impl Scorer for ReferenceTfScorer<'_> {
    fn score(&mut self, view: &ViewContext<'_>, image: &Image) -> Result<ScoreResult> {
        let reference = self.reference_image(&view.pose, view.background)?;
        score_reference(image, &reference)
    }

    fn describe(&self) -> String {
        "reference-tf".into()
    }
}

/// One prompt per non-empty line.
pub fn load_prompt_pool(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let pool: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if pool.is_empty() {
        return Err(Error::Degenerate(format!("prompt pool {} is empty", path.display())));
    }
    Ok(pool)
}

/// `count` prompts drawn uniformly with replacement.
pub fn sample_negatives<R: Rng + ?Sized>(pool: &[String], count: usize, rng: &mut R) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::Degenerate("prompt pool is empty".into()));
    }
    if count == 0 {
        return Err(Error::invalid("negative count must be at least 1"));
    }
    Ok((0..count).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::child_rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = child_rng(seed, 0, 0);
        Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn reference_identity_and_offset() {
        let img = random_image(1, 4, 4);
        let r = score_reference(&img, &img).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.dloss_dimage.data().iter().all(|&g| g == 0.0));

        let mut shifted = img.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 0.1);
        let r = score_reference(&shifted, &img).unwrap();
        assert!((r.loss - 0.01).abs() < 1e-12);
        assert!(score_reference(&img, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn reference_gradient_fd() {
        let img = random_image(2, 4, 4);
        let reference = random_image(3, 4, 4);
        let r = score_reference(&img, &reference).unwrap();
        let h = 1e-6;
        for i in 0..img.data().len() {
            let mut p = img.clone();
            p.data_mut()[i] += h;
            let mut m = img.clone();
            m.data_mut()[i] -= h;
            let fd = (score_reference(&p, &reference).unwrap().loss - score_reference(&m, &reference).unwrap().loss) / (2.0 * h);
            let g = r.dloss_dimage.data()[i];
            assert!((fd - g).abs() <= 1e-8 * g.abs().max(1e-3), "{fd} vs {g}");
        }
    }

    #[test]
    fn directional_derivative() {
        let img = random_image(4, 5, 3);
        let reference = random_image(5, 5, 3);
        let dir = random_image(6, 5, 3);
        let r = score_reference(&img, &reference).unwrap();
        let inner: f64 = r.dloss_dimage.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let mut prev = f64::INFINITY;
        for h in [1e-2, 1e-3, 1e-4] {
            let mut p = img.clone();
            p.data_mut().iter_mut().zip(dir.data()).for_each(|(v, d)| *v += h * d);
            let est = (score_reference(&p, &reference).unwrap().loss - r.loss) / h;
            let err = (est - inner).abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn negatives_single_line_pool() {
        let pool = vec!["only".to_string()];
        let mut rng = child_rng(0, 0, 0);
        assert_eq!(sample_negatives(&pool, 3, &mut rng).unwrap(), vec!["only"; 3]);
        assert!(sample_negatives(&[], 3, &mut rng).is_err());
    }

    #[test]
    fn negatives_seeded_and_uniform() {
        let pool: Vec<String> = vec!["a".into(), "b".into()];
        let a = sample_negatives(&pool, 128, &mut child_rng(3, 1, 0)).unwrap();
        let b = sample_negatives(&pool, 128, &mut child_rng(3, 1, 0)).unwrap();
        assert_eq!(a, b);
        let draws = sample_negatives(&pool, 20_000, &mut child_rng(4, 0, 0)).unwrap();
        let freq = draws.iter().filter(|s| *s == "a").count() as f64 / 20_000.0;
        // 4 sigma of a Bernoulli(0.5) mean over 20k draws
        assert!((freq - 0.5).abs() < 4.0 * (0.25f64 / 20_000.0).sqrt());
    }

    #[test]
    fn prompt_order() {
        let p = PromptSet {
            positive: "tree".into(),
            user_negatives: vec!["a blank image".into()],
            pool_negatives: vec!["x".into(), "y".into()],
        };
        assert_eq!(p.negatives(), vec!["x", "y", "a blank image"]);
    }
}
