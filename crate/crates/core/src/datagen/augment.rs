use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::world::SyntheticWorld;
use super::ImageLayout;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    /// Keep subject latents, perturb the rest.
    LatentNuisance,
    /// Mask, jitter and horizontal flip on image rows.
    Pixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationRule {
    pub kind: AugmentationKind,
    /// Latent rule: mixing weight σ in `√(1−σ²)·n + σ·ε`. Pixel rule: jitter std.
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub flip_prob: f64,
    #[serde(default)]
    pub mask_prob: f64,
}

fn one() -> f64 {
    1.0
}

impl AugmentationRule {
    pub fn latent(noise_scale: f64) -> Self {
        Self { kind: AugmentationKind::LatentNuisance, noise_scale, flip_prob: 0.0, mask_prob: 0.0 }
    }

    pub fn pixel(noise_scale: f64, flip_prob: f64, mask_prob: f64) -> Self {
        Self { kind: AugmentationKind::Pixel, noise_scale, flip_prob, mask_prob }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.noise_scale >= 0.0) || !unit(self.flip_prob) || !unit(self.mask_prob) {
            return Err(Error::Config(format!("invalid augmentation rule {self:?}")));
        }
        if self.kind == AugmentationKind::LatentNuisance && self.noise_scale > 1.0 {
            return Err(Error::Config("latent noise scale must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// What a batch is made of, which decides the rules it admits.
#[derive(Clone, Copy, Debug)]
pub enum ViewSource<'a> {
    /// Latents of a synthetic world. `keep` overrides the world's subject set.
    Latent { world: &'a SyntheticWorld, latents: &'a Tensor, keep: Option<&'a [usize]> },
    /// Observed rows; `layout` is set for image data.
    Features { x: &'a Tensor, layout: Option<ImageLayout> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub x1: Tensor,
    pub x2: Tensor,
    /// View latents, for latent-rule batches.
    pub s1: Option<Tensor>,
    pub s2: Option<Tensor>,
}

pub fn make_views(source: ViewSource<'_>, rule: &AugmentationRule, rng: &mut rng::Rng) -> Result<Views> {
    rule.validate()?;
    match (rule.kind, source) {
        (AugmentationKind::LatentNuisance, ViewSource::Latent { world, latents, keep }) => {
            let keep = keep.unwrap_or(&world.subject);
            let s1 = perturb_latents(latents, keep, rule.noise_scale, rng)?;
            let s2 = perturb_latents(latents, keep, rule.noise_scale, rng)?;
            Ok(Views { x1: world.decode(&s1)?, x2: world.decode(&s2)?, s1: Some(s1), s2: Some(s2) })
        }
        (AugmentationKind::Pixel, ViewSource::Features { x, layout: Some(layout) }) => {
            let x1 = pixel_view(x, layout, rule, rng)?;
            let x2 = pixel_view(x, layout, rule, rng)?;
            Ok(Views { x1, x2, s1: None, s2: None })
        }
        (AugmentationKind::Pixel, _) => Err(Error::Kind("pixel augmentation needs image data".into())),
        (AugmentationKind::LatentNuisance, _) => {
            Err(Error::Kind("latent augmentation needs synthetic latents".into()))
        }
    }
}

fn perturb_latents(s: &Tensor, keep: &[usize], sigma: f64, rng: &mut rng::Rng) -> Result<Tensor> {
    let (n, d) = s.dims2()?;
    if let Some(&j) = keep.iter().find(|&&j| j >= d) {
        return Err(Error::Dimension(format!("kept feature {j} outside latent dim {d}")));
    }
    let mut kept = vec![false; d];
    keep.iter().for_each(|&j| kept[j] = true);
    let retain = (1.0 - sigma * sigma).sqrt();
    let mut out = s.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for i in 0..n {
        for j in 0..d {
            if !kept[j] {
                let e = rng::gaussian(rng);
                let v = &mut out.data_mut()[i * d + j];
                *v = retain * *v + sigma * e;
            }
        }
    }
    Ok(out)
}

fn pixel_view(x: &Tensor, layout: ImageLayout, rule: &AugmentationRule, rng: &mut rng::Rng) -> Result<Tensor> {
    let (n, dim) = x.dims2()?;
    if dim != layout.len() {
        return Err(Error::Dimension(format!("rows have {dim} values, layout expects {}", layout.len())));
    }
    let ImageLayout { channels, height, width } = layout;
    let plane = height * width;
    let mut out = Vec::with_capacity(n * dim);
    let mut img = vec![0.0; dim];
    for i in 0..n {
        let src = x.row(i);
        let flip = rule.flip_prob > 0.0 && rng.random::<f64>() < rule.flip_prob;
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    let sw = if flip { width - 1 - w } else { w };
                    img[c * plane + h * width + w] = src[c * plane + h * width + sw];
                }
            }
        }
        if rule.mask_prob > 0.0 {
            for p in 0..plane {
                if rng.random::<f64>() < rule.mask_prob {
                    (0..channels).for_each(|c| img[c * plane + p] = 0.0);
                }
            }
        }
        if rule.noise_scale > 0.0 {
            for v in img.iter_mut() {
                *v = (*v + rule.noise_scale * rng::gaussian(rng)).clamp(0.0, 1.0);
            }
        }
        out.extend_from_slice(&img);
    }
    Tensor::from_rows(n, dim, out)
}
