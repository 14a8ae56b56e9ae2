//! The patch optimization loop: per scene a fresh transform draw, render,
//! detector forward, target selection and loss, then one Adam step on the
//! patch pixels with the detector frozen.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::creases::CreaseFieldConfig;
use crate::detector::{select_attack_targets, Detection, Detector};
use crate::eot::{sample_transform_with, EotConfig};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::loss::{
    detection_loss_grad, similarity_loss_grad, tv_loss_grad, GuideImage, LossBreakdown, LossWeights, PatchImage,
};
use crate::optim::{Adam, AdamState};
use crate::render::{render_traced, RenderConfig, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    #[default]
    RandomUniform,
    FromGuide,
    Gray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub render: RenderConfig,
    pub eot: EotConfig,
    pub creases: CreaseFieldConfig,
    pub patch_init: PatchInit,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 5,
            batch_size: 8,
            render: RenderConfig::default(),
            eot: EotConfig::default(),
            creases: CreaseFieldConfig::default(),
            patch_init: PatchInit::RandomUniform,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        self.render.validate()?;
        self.eot.validate()?;
        self.creases.validate()
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(dataset_len)
    }

    fn adam(&self) -> Adam {
        Adam::new(self.lr, self.adam_beta1, self.adam_beta2)
    }
}

/// Loss of one step, evaluated on the patch before that step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
    /// Seconds since the run (or resumed segment) started. Not written to
    /// the CSV log so that logs of identical runs compare equal.
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "epoch,step,l_det,l_sim,l_tv,l_total";

impl TrainLogRecord {
    pub fn csv_line(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{:e},{:e},{:e},{:e}",
            self.epoch, self.step, b.l_det, b.l_sim, b.l_tv, b.l_total
        )
    }
}

pub fn log_to_csv(records: &[TrainLogRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Everything needed to continue a run: the patch, Adam moments and the
/// index of the next global step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub patch: PatchImage,
    pub adam: AdamState,
    pub next_step: usize,
}

/// Independent stream per `(seed, tag, a, b)`, so any step can be replayed
/// without consuming earlier draws.
pub(crate) fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for v in [seed, tag, a, b] {
        h.update(v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_TRANSFORM: u64 = 3;

pub fn initial_patch(guide: &GuideImage, cfg: &AttackConfig) -> Result<PatchImage> {
    let (h, w) = (guide.height(), guide.width());
    let img = match cfg.patch_init {
        PatchInit::RandomUniform => {
            let mut rng = derived_rng(cfg.seed, TAG_INIT, 0, 0);
            Image::from_fn(3, h, w, |_, _, _| rng.gen::<f64>())
        }
        PatchInit::FromGuide => guide.image().clone(),
        PatchInit::Gray => Image::filled(3, h, w, 0.5),
    };
    PatchImage::new(img)
}

pub fn initial_state(guide: &GuideImage, cfg: &AttackConfig) -> Result<TrainState> {
    let patch = initial_patch(guide, cfg)?;
    let adam = cfg.adam().init(patch.image().len());
    Ok(TrainState {
        patch,
        adam,
        next_step: 0,
    })
}

fn epoch_order(cfg: &AttackConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(cfg.seed, TAG_SHUFFLE, epoch as u64, 0));
    order
}

/// Loss and patch gradient for one batch at the current patch.
pub fn batch_loss_grad(
    batch: &[&Scene],
    detector: &Detector,
    guide: &GuideImage,
    patch: &PatchImage,
    cfg: &AttackConfig,
    step: usize,
) -> Result<(LossBreakdown, Image)> {
    let person = detector.handle().person_class_index;
    let dims = (patch.width(), patch.height());
    let mut passes = Vec::with_capacity(batch.len());
    let mut selected: Vec<Vec<Detection>> = Vec::with_capacity(batch.len());
    for (slot, scene) in batch.iter().enumerate() {
        let mut rng = derived_rng(cfg.seed, TAG_TRANSFORM, step as u64, slot as u64);
        let t = sample_transform_with(&cfg.eot, &cfg.creases, dims, &mut rng)?;
        let (rendered, trace) = render_traced(scene, patch, &t, &cfg.render)?;
        let pass = detector.forward(&rendered.scene.image)?;
        selected.push(select_attack_targets(&pass.detections, detector.handle()));
        passes.push((pass, trace));
    }
    let (l_det, det_grad) = detection_loss_grad(&selected, person)?;
    let (l_sim, sim_grad) = similarity_loss_grad(patch, guide)?;
    let (l_tv, tv_grad) = tv_loss_grad(patch)?;
    let w = cfg.weights;
    let breakdown = LossBreakdown::combine(&w, l_det, l_sim, l_tv);

    let mut grad = Image::new(3, patch.height(), patch.width());
    if w.alpha != 0.0 {
        for (((pass, trace), dets), g) in passes.iter().zip(&selected).zip(&det_grad.per_image) {
            if dets.is_empty() {
                continue;
            }
            let per: Vec<(usize, f64, f64)> = dets
                .iter()
                .zip(g)
                .map(|(d, &(go, gc))| (d.index, w.alpha * go, w.alpha * gc))
                .collect();
            let g_scene = detector.backward(pass, &per);
            grad.add_assign(&trace.backward(&g_scene));
        }
    }
    for (k, g) in [(w.beta, sim_grad), (w.gamma, tv_grad)] {
        if k != 0.0 {
            let mut g = g;
            g.scale(k);
            grad.add_assign(&g);
        }
    }
    Ok((breakdown, grad))
}

/// Advances `state` up to (not including) global step `until`, or to the
/// end of the run. Each record is passed to `on_record` as it is produced.
pub fn run_steps(
    dataset: &[Scene],
    detector: &Detector,
    guide: &GuideImage,
    cfg: &AttackConfig,
    state: &mut TrainState,
    until: Option<usize>,
    mut on_record: impl FnMut(&TrainLogRecord),
) -> Result<Vec<TrainLogRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    state.patch.image().ensure_shape(guide.image())?;
    let spe = cfg.steps_per_epoch(dataset.len());
    let total = cfg.total_steps(dataset.len());
    let end = until.map_or(total, |u| u.min(total));
    let adam = cfg.adam();
    let start = Instant::now();
    let mut records = Vec::with_capacity(end.saturating_sub(state.next_step));
    let mut order: Option<(usize, Vec<usize>)> = None;
    while state.next_step < end {
        let step = state.next_step;
        let epoch = step / spe;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(cfg, epoch, dataset.len())));
        }
        let idx = &order.as_ref().expect("set above").1;
        let b = step % spe;
        let batch: Vec<&Scene> = idx[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(idx.len())]
            .iter()
            .map(|&i| &dataset[i])
            .collect();
        let (breakdown, grad) = batch_loss_grad(&batch, detector, guide, &state.patch, cfg, step)?;
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::NonFinite { term, epoch, step });
        }
        adam.step(&mut state.adam, state.patch.image_mut().data_mut(), grad.data());
        state.patch.clamp();
        state.next_step += 1;
        let rec = TrainLogRecord {
            epoch,
            step,
            breakdown,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::debug!("{}", rec.csv_line());
        on_record(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Runs the whole optimization from a fresh patch.
pub fn optimize_patch(
    dataset: &[Scene],
    detector: &Detector,
    guide: &GuideImage,
    cfg: &AttackConfig,
) -> Result<(PatchImage, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    let mut state = initial_state(guide, cfg)?;
    let log = run_steps(dataset, detector, guide, cfg, &mut state, None, |_| {})?;
    Ok((state.patch, log))
}

pub const CHECKPOINT_MAGIC: &str = "ADVPATCH-CKPT";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: AttackConfig,
    next_step: usize,
    height: usize,
    width: usize,
    adam_t: u64,
}

/// Writes `magic version\n`, a little-endian u64 metadata length, JSON
/// metadata, the patch and both Adam moment arrays as little-endian f64,
/// then a SHA-256 of all preceding bytes.
pub fn save_checkpoint(path: &Path, cfg: &AttackConfig, state: &TrainState) -> Result<()> {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        next_step: state.next_step,
        height: state.patch.height(),
        width: state.patch.width(),
        adam_t: state.adam.t,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| invalid(e.to_string()))?;
    let mut buf = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for arr in [state.patch.image().data(), &state.adam.m, &state.adam.v] {
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AttackConfig, TrainState)> {
    let bytes = fs::read(path)?;
    let corrupt = |reason: &str| Error::CheckpointCorrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .filter(|&p| p < 64)
        .ok_or_else(|| corrupt("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not UTF-8"))?;
    let version = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| corrupt("not a patch checkpoint"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    if bytes.len() < nl + 1 + 8 + 32 {
        return Err(corrupt("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = nl + 1;
    let len = u64::from_le_bytes(body[pos..pos + 8].try_into().expect("8 bytes")) as usize;
    pos += 8;
    let json = body.get(pos..pos + len).ok_or_else(|| corrupt("truncated metadata"))?;
    pos += len;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| corrupt(&format!("metadata: {e}")))?;
    let n = 3 * meta.height * meta.width;
    if body.len() - pos != 3 * n * 8 {
        return Err(corrupt("array section has the wrong length"));
    }
    let mut arrays = body[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect::<Vec<f64>>();
    let v = arrays.split_off(2 * n);
    let m = arrays.split_off(n);
    let patch = PatchImage::new(Image::from_vec(3, meta.height, meta.width, arrays)?)?;
    Ok((
        meta.config,
        TrainState {
            patch,
            adam: AdamState { t: meta.adam_t, m, v },
            next_step: meta.next_step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let guide = GuideImage::new(Image::from_fn(3, 5, 4, |c, y, x| (c + y * x) as f64 / 20.0)).unwrap();
        let cfg = AttackConfig::default();
        let mut s = initial_state(&guide, &cfg).unwrap();
        s.adam.t = 7;
        s.adam
            .m
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 * 1e-3 + 1e-17);
        s.adam
            .v
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).sqrt() / 3.0);
        s.next_step = 11;
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let cfg = AttackConfig {
            lr: 0.0123456789,
            patch_init: PatchInit::FromGuide,
            ..AttackConfig::default()
        };
        let s = state();
        save_checkpoint(&p, &cfg, &s).unwrap();
        let (cfg2, s2) = load_checkpoint(&p).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(s, s2);
    }

    #[test]
    fn corrupt_and_versioned_checkpoints_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &AttackConfig::default(), &state()).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        let k = bad.len() - 100;
        bad[k] ^= 1;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointCorrupt { .. })));

        fs::write(&p, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointCorrupt { .. })));

        let mut v9 = b"ADVPATCH-CKPT 9".to_vec();
        v9.extend_from_slice(&good[CHECKPOINT_MAGIC.len() + 2..]);
        fs::write(&p, &v9).unwrap();
        match load_checkpoint(&p) {
            Err(Error::CheckpointVersion { found, .. }) => assert_eq!(found, "9"),
            other => panic!("unexpected {other:?}"),
        }

        fs::write(&p, b"hello").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointCorrupt { .. })));
    }

    #[test]
    fn config_validation() {
        let d = AttackConfig::default;
        assert!(AttackConfig { lr: 0.0, ..d() }.validate().is_err());
        assert!(AttackConfig { adam_beta2: 1.0, ..d() }.validate().is_err());
        assert!(AttackConfig { batch_size: 0, ..d() }.validate().is_err());
        assert_eq!(AttackConfig::default().steps_per_epoch(17), 3);
    }

    #[test]
    fn config_toml_like_json_round_trip() {
        let c = AttackConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"random_uniform\""));
        let back: AttackConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
        assert!(serde_json::from_str::<AttackConfig>("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn log_csv_layout() {
        let r = TrainLogRecord {
            epoch: 0,
            step: 3,
            breakdown: LossBreakdown::combine(&LossWeights::default(), 0.5, 0.25, 1.0),
            wall_time: 9.0,
        };
        let csv = log_to_csv(&[r]);
        assert_eq!(csv, "epoch,step,l_det,l_sim,l_tv,l_total\n0,3,5e-1,2.5e-1,1e0,2e0\n");
    }
}
