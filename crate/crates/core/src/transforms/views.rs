use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::blur::{gaussian_blur, median_blur};
use super::nonshift::{apply_nonshift, NonShiftConfig, NonShiftSpec};
use super::resize::at_resolution_batch;
use super::shift::ShiftSet;
use crate::diffusion::{dissolve_with, DiffusionSchedule, NoisePredictor};
use crate::error::{validation, Error, Result};
use crate::image::{Image, ImageBatch, ValueRange};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissolveMethod {
    Diffusion,
    Gaussian,
    Median,
    ResizeOnly,
}

impl std::str::FromStr for DissolveMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "gaussian" => Ok(Self::Gaussian),
            "median" => Ok(Self::Median),
            "resize_only" => Ok(Self::ResizeOnly),
            other => Err(validation(format!("unknown dissolve method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DissolveConfig {
    pub t_low: usize,
    pub t_high: usize,
    /// Side length at which dissolving runs.
    pub resolution: usize,
    pub method: DissolveMethod,
    /// Heuristic methods only.
    pub kernel_size: usize,
}

impl Default for DissolveConfig {
    fn default() -> Self {
        Self {
            t_low: 30,
            t_high: 130,
            resolution: 32,
            method: DissolveMethod::Diffusion,
            kernel_size: 3,
        }
    }
}

impl DissolveConfig {
    /// `max_t` is the diffusion horizon when the method is diffusion-based.
    pub fn validate(&self, max_t: Option<usize>) -> Result<()> {
        if self.t_low < 1 || self.t_low > self.t_high {
            return Err(validation(format!(
                "timestep range [{}, {}] must satisfy 1 <= t_low <= t_high",
                self.t_low, self.t_high
            )));
        }
        if let Some(max) = max_t {
            if self.t_high > max {
                return Err(Error::Timestep {
                    t: self.t_high,
                    max,
                });
            }
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(validation(format!(
                "kernel size {} must be odd and at least 3",
                self.kernel_size
            )));
        }
        if self.resolution < 8 {
            return Err(validation(format!(
                "dissolve resolution {} below the minimum of 8",
                self.resolution
            )));
        }
        if matches!(self.method, DissolveMethod::Gaussian | DissolveMethod::Median)
            && self.kernel_size >= self.resolution
        {
            return Err(validation(format!(
                "kernel size {} must be smaller than the dissolve resolution {}",
                self.kernel_size, self.resolution
            )));
        }
        Ok(())
    }

    pub fn sample_t(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.t_low..=self.t_high)
    }
}

/// Dissolving operator 𝒟 at the working resolution.
pub trait Dissolver {
    /// `images` are `[0, 1]` images at the working resolution; `t` has one
    /// step per image.
    fn dissolve(&mut self, images: Vec<Image>, t: &[usize]) -> Result<Vec<Image>>;

    /// `(C, H, W)` the operator requires at the working resolution, if fixed.
    fn required_shape(&self) -> Option<(usize, usize, usize)> {
        None
    }
}

/// Blur or pure resampling; the timestep is ignored.
#[derive(Clone, Copy, Debug)]
pub struct HeuristicDissolver {
    pub method: DissolveMethod,
    pub kernel_size: usize,
}

impl Dissolver for HeuristicDissolver {
    fn dissolve(&mut self, images: Vec<Image>, _t: &[usize]) -> Result<Vec<Image>> {
        match self.method {
            DissolveMethod::Gaussian => images
                .iter()
                .map(|i| gaussian_blur(i, self.kernel_size))
                .collect(),
            DissolveMethod::Median => images
                .iter()
                .map(|i| median_blur(i, self.kernel_size))
                .collect(),
            DissolveMethod::ResizeOnly => Ok(images),
            DissolveMethod::Diffusion => Err(validation(
                "diffusion dissolving needs a trained denoiser",
            )),
        }
    }
}

/// Single-step diffusion dissolving with a noise predictor.
pub struct DiffusionDissolver<'a, P: NoisePredictor> {
    pub predictor: &'a P,
    pub schedule: &'a DiffusionSchedule,
    /// `(C, H, W)` the predictor was trained on.
    pub image_shape: (usize, usize, usize),
}

impl<P: NoisePredictor> Dissolver for DiffusionDissolver<'_, P> {
    fn dissolve(&mut self, images: Vec<Image>, t: &[usize]) -> Result<Vec<Image>> {
        let batch = ImageBatch::from_images(&images, ValueRange::Unit)?;
        Ok(dissolve_with(self.predictor, self.schedule, &batch, t)?
            .images()
            .collect())
    }

    fn required_shape(&self) -> Option<(usize, usize, usize)> {
        Some(self.image_shape)
    }
}

/// Runs `dissolver` on `images` at `config.resolution` and resamples back.
pub fn dissolve_images(
    config: &DissolveConfig,
    dissolver: &mut dyn Dissolver,
    images: &[Image],
    t: &[usize],
) -> Result<Vec<Image>> {
    if t.len() != images.len() {
        return Err(Error::Shape(format!(
            "{} timesteps for {} images",
            t.len(),
            images.len()
        )));
    }
    if let (Some(req), Some(first)) = (dissolver.required_shape(), images.first()) {
        let working = (first.channels(), config.resolution, config.resolution);
        if req != working {
            return Err(Error::Shape(format!(
                "dissolver expects {req:?} but works at {working:?}"
            )));
        }
    }
    at_resolution_batch(images, config.resolution, |small| {
        dissolver.dissolve(small, t)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// 𝒯∘S_k
    O,
    /// A second, independent draw of 𝒯∘S_k.
    OPrime,
    /// 𝒯∘S_k∘𝒟
    A,
}

impl Branch {
    pub fn index(self) -> usize {
        match self {
            Branch::O => 0,
            Branch::OPrime => 1,
            Branch::A => 2,
        }
    }
}

/// Views ordered `branch · K·B + k · B + n`.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub views: Vec<Image>,
    pub shift_index: Vec<usize>,
    pub branch: Vec<Branch>,
    /// Timestep of each A view; `None` elsewhere.
    pub dissolve_t: Vec<Option<usize>>,
    /// Index of the source image within the input batch.
    pub source: Vec<usize>,
    pub specs: Vec<NonShiftSpec>,
    pub k: usize,
    pub b: usize,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn branches(&self) -> usize {
        self.views.len() / (self.k * self.b)
    }

    pub fn has_dissolved(&self) -> bool {
        self.branches() == 3
    }

    pub fn to_batch(&self) -> Result<ImageBatch> {
        ImageBatch::from_images(&self.views, ValueRange::Unit)
    }
}

/// Builds the O, O′ and (optionally) A branches for a batch.
#[derive(Clone, Debug)]
pub struct ViewComposer {
    pub shifts: ShiftSet,
    pub nonshift: NonShiftConfig,
    pub dissolve: DissolveConfig,
    /// `false` drops the A branch.
    pub include_dissolved: bool,
}

impl ViewComposer {
    pub fn compose(
        &self,
        images: &[Image],
        dissolver: Option<&mut dyn Dissolver>,
        rng: &mut impl Rng,
    ) -> Result<ViewBatch> {
        let b = images.len();
        if b == 0 {
            return Err(validation("cannot compose views of an empty batch"));
        }
        let (_, h, w) = images[0].shape();
        if images.iter().any(|i| i.shape() != images[0].shape()) {
            return Err(Error::Shape("views need images of one shape".into()));
        }
        let k = self.shifts.len();
        for s in self.shifts.shifts() {
            s.check(h, w)?;
        }
        let branches: &[Branch] = if self.include_dissolved {
            &[Branch::O, Branch::OPrime, Branch::A]
        } else {
            &[Branch::O, Branch::OPrime]
        };
        let total = branches.len() * k * b;
        let mut out = ViewBatch {
            views: Vec::with_capacity(total),
            shift_index: Vec::with_capacity(total),
            branch: Vec::with_capacity(total),
            dissolve_t: Vec::with_capacity(total),
            source: Vec::with_capacity(total),
            specs: Vec::with_capacity(total),
            k,
            b,
        };

        let dissolved = if self.include_dissolved {
            let dissolver = dissolver.ok_or_else(|| {
                validation("the dissolved branch needs a dissolver")
            })?;
            let ts: Vec<usize> = (0..k * b).map(|_| self.dissolve.sample_t(rng)).collect();
            let sources: Vec<Image> = (0..k).flat_map(|_| images.iter().cloned()).collect();
            Some((dissolve_images(&self.dissolve, dissolver, &sources, &ts)?, ts))
        } else {
            None
        };

        for &branch in branches {
            for kk in 0..k {
                for n in 0..b {
                    let (base, t) = match (&dissolved, branch) {
                        (Some((imgs, ts)), Branch::A) => (&imgs[kk * b + n], Some(ts[kk * b + n])),
                        _ => (&images[n], None),
                    };
                    let shifted = self.shifts.apply(kk, base)?;
                    let spec = self.nonshift.sample(h, w, rng);
                    out.views.push(apply_nonshift(&shifted, &spec)?);
                    out.shift_index.push(kk);
                    out.branch.push(branch);
                    out.dissolve_t.push(t);
                    out.source.push(n);
                    out.specs.push(spec);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{ShiftKind, Shift};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Recorder {
        calls: Vec<(Vec<Image>, Vec<usize>)>,
    }

    impl Dissolver for Recorder {
        fn dissolve(&mut self, images: Vec<Image>, t: &[usize]) -> Result<Vec<Image>> {
            self.calls.push((images.clone(), t.to_vec()));
            Ok(images.iter().map(|i| i.map(|v| 1.0 - v)).collect())
        }
    }

    fn asym(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(1, side, side, (0..side * side).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn composer(k: usize) -> ViewComposer {
        ViewComposer {
            shifts: ShiftSet::new(ShiftKind::Rotate, k).unwrap(),
            nonshift: NonShiftConfig::identity(),
            dissolve: DissolveConfig {
                resolution: 16,
                ..Default::default()
            },
            include_dissolved: true,
        }
    }

    #[test]
    fn counts_and_annotations() {
        let imgs = vec![asym(32, 1), asym(32, 2)];
        let mut rec = Recorder { calls: vec![] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = composer(4).compose(&imgs, Some(&mut rec), &mut rng).unwrap();
        assert_eq!(v.len(), 24);
        for (tag, idx) in [(Branch::O, 0), (Branch::OPrime, 1), (Branch::A, 2)] {
            let of_tag: Vec<usize> = (0..24).filter(|&i| v.branch[i] == tag).collect();
            assert_eq!(of_tag.len(), 8);
            assert!(of_tag.iter().all(|&i| i / 8 == idx));
            let mut ks: Vec<usize> = of_tag.iter().map(|&i| v.shift_index[i]).collect();
            ks.sort();
            assert_eq!(ks, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        }
        for i in 0..24 {
            assert_eq!(v.shift_index[i], (i % 8) / 2);
            assert_eq!(v.source[i], i % 2);
            let t = v.dissolve_t[i];
            assert_eq!(t.is_some(), v.branch[i] == Branch::A);
            assert!(t.is_none_or(|t| (30..=130).contains(&t)));
        }
    }

    #[test]
    fn dissolving_precedes_shift_at_working_resolution() {
        let imgs = vec![asym(32, 3)];
        let mut rec = Recorder { calls: vec![] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = composer(4).compose(&imgs, Some(&mut rec), &mut rng).unwrap();
        assert_eq!(rec.calls.len(), 1);
        let (inputs, ts) = &rec.calls[0];
        assert_eq!(inputs.len(), 4);
        let small = super::super::resize_bilinear(&imgs[0], 16, 16);
        for img in inputs {
            assert_eq!(img.shape(), (1, 16, 16));
            // Unshifted: every call sees the same downsampled source.
            assert_eq!(img, &small);
        }
        let a_t: Vec<usize> = v.dissolve_t.iter().flatten().copied().collect();
        assert_eq!(&a_t, ts);
        // A view k is S_k applied to the dissolved image.
        let dissolved = super::super::resize_bilinear(&small.map(|x| 1.0 - x), 32, 32);
        for kk in 0..4 {
            let expect = Shift::Rotate(kk as u8).apply(&dissolved).unwrap();
            assert_eq!(v.views[8 + kk], expect);
        }
    }

    #[test]
    fn without_dissolved_branch() {
        let mut c = composer(2);
        c.include_dissolved = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = c.compose(&[asym(16, 4)], None, &mut rng).unwrap();
        assert_eq!(v.len(), 4);
        assert!(!v.has_dissolved());
        assert!(v.dissolve_t.iter().all(Option::is_none));
    }

    #[test]
    fn missing_dissolver_or_bad_shape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(composer(4).compose(&[asym(16, 5)], None, &mut rng).is_err());
        let pred = |x: &candle_core::Tensor, _: &[usize]| Ok(x.zeros_like()?);
        let sched = crate::diffusion::ScheduleSpec::default().build().unwrap();
        let mut d = DiffusionDissolver {
            predictor: &pred,
            schedule: &sched,
            image_shape: (1, 32, 32),
        };
        assert!(composer(4).compose(&[asym(16, 5)], Some(&mut d), &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = DissolveConfig::default();
        assert!(ok.validate(Some(1000)).is_ok());
        assert!(ok.validate(Some(100)).is_err());
        for bad in [
            DissolveConfig { t_low: 0, ..ok.clone() },
            DissolveConfig { t_low: 50, t_high: 40, ..ok.clone() },
            DissolveConfig { kernel_size: 4, ..ok.clone() },
            DissolveConfig { resolution: 4, ..ok.clone() },
        ] {
            assert!(bad.validate(None).is_err());
        }
    }
}
