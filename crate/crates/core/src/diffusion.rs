//! Diffusion purification: forward noising to step `t*`, then reverse
//! denoising with an epsilon-predicting 1-D conv net.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spkguard_autograd::{Graph, Tensor, Var};

use crate::audio::Waveform;
use crate::error::{config_err, input_err, Result};
use crate::params::{average_grads, Adam, Bound, ParamSet};
use crate::rng;

const TIME_EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear betas from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("diffusion needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(config_err(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().expect("nonempty");
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(input_err(format!("step {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn q_sample(schedule: &DiffusionSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if noise.len() != x0.len() {
        return Err(input_err("noise and signal lengths differ"));
    }
    let ab = schedule.alpha_bar(t);
    if ab == 1.0 {
        return Ok(x0.to_vec());
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

pub fn gaussian(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r))
        .collect()
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding(t: usize) -> Vec<f64> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = Vec::with_capacity(TIME_EMBED_DIM);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
        out.push((t as f64 * freq).cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            kernel: 3,
            dilations: vec![2, 4],
        }
    }
}

/// Input conv, dilated residual convs, output conv; the projected step
/// embedding is added after the input conv.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamSet,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 || config.kernel % 2 == 0 || config.dilations.contains(&0) {
            return Err(config_err("denoiser needs positive channels/dilations and an odd kernel"));
        }
        let (c, k) = (config.channels, config.kernel);
        let mut r = rng::stream(seed, "denoiser-init", &[]);
        let mut p = ParamSet::new();
        p.insert_normal("in.w", &[c, 1, k], (2.0 / k as f64).sqrt(), &mut r);
        p.insert("in.b", Tensor::zeros(vec![c]));
        p.insert_normal("temb.w", &[c, TIME_EMBED_DIM], (1.0 / TIME_EMBED_DIM as f64).sqrt(), &mut r);
        p.insert("temb.b", Tensor::zeros(vec![c, 1]));
        for i in 0..config.dilations.len() {
            p.insert_normal(&format!("mid{i}.w"), &[c, c, k], (1.0 / (c * k) as f64).sqrt(), &mut r);
            p.insert(format!("mid{i}.b"), Tensor::zeros(vec![c]));
        }
        p.insert_normal("out.w", &[1, c, k], 0.1 * (1.0 / (c * k) as f64).sqrt(), &mut r);
        p.insert("out.b", Tensor::zeros(vec![1]));
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Predicted noise `[1, len]` for `x_t` given as `[1, len]`.
    pub fn predict_graph(&self, g: &mut Graph, p: &Bound, xt: Var, t: usize) -> Result<Var> {
        let len = g.shape(xt)[1];
        let pad = self.config.kernel / 2;
        let mut h = g.conv1d(xt, p.var("in.w"), Some(p.var("in.b")), pad, 1)?;
        let te = g.constant(Tensor::new(vec![TIME_EMBED_DIM, 1], time_embedding(t))?);
        let te = g.matmul(p.var("temb.w"), te)?;
        let te = g.add(te, p.var("temb.b"))?;
        let te = g.expand(te, 1, len)?;
        h = g.add(h, te)?;
        h = g.relu(h)?;
        for (i, &d) in self.config.dilations.iter().enumerate() {
            let w = p.var(&format!("mid{i}.w"));
            let b = p.var(&format!("mid{i}.b"));
            let r = g.conv1d(h, w, Some(b), pad * d, d)?;
            let r = g.relu(r)?;
            h = g.add(h, r)?;
        }
        Ok(g.conv1d(h, p.var("out.w"), Some(p.var("out.b")), pad, 1)?)
    }

    pub fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, xt.len()], xt.to_vec())?);
        let e = self.predict_graph(&mut g, &p, x, t)?;
        Ok(g.value(e).data().to_vec())
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = self.params.clone();
        let c = &self.config;
        p.insert("meta.denoiser", Tensor::vector(vec![c.channels as f64, c.kernel as f64]));
        p.insert("meta.dilations", Tensor::vector(c.dilations.iter().map(|&d| d as f64).collect()));
        p
    }

    pub fn from_params(all: &ParamSet) -> Result<Self> {
        let m = all.get("meta.denoiser")?.data().to_vec();
        if m.len() != 2 {
            return Err(input_err("malformed denoiser metadata"));
        }
        let config = DenoiserConfig {
            channels: m[0] as usize,
            kernel: m[1] as usize,
            dilations: all.get("meta.dilations")?.data().iter().map(|&d| d as usize).collect(),
        };
        let mut d = Self::new(config, 0)?;
        let names: Vec<String> = d.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let t = all.get(&name)?;
            if t.shape() != d.params.get(&name)?.shape() {
                return Err(input_err(format!("shape mismatch for `{name}`")));
            }
            d.params.insert(name, t.clone());
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop_len: usize,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 1e-3,
            crop_len: 800,
            seed: 0,
        }
    }
}

/// One epsilon-prediction training item.
#[derive(Clone, Debug)]
pub struct NoisedCrop {
    pub xt: Vec<f64>,
    pub noise: Vec<f64>,
    pub t: usize,
}

/// Draws a random crop, step and noise from `clean`.
pub fn draw_crop(clean: &[&Waveform], schedule: &DiffusionSchedule, crop_len: usize, r: &mut rng::Rng) -> Result<NoisedCrop> {
    let w = clean[r.random_range(0..clean.len())].samples();
    let len = crop_len.min(w.len());
    let start = r.random_range(0..=w.len() - len);
    let x0 = &w[start..start + len];
    let t = r.random_range(1..=schedule.steps());
    let noise = gaussian(len, r);
    let xt = q_sample(schedule, x0, t, &noise)?;
    Ok(NoisedCrop { xt, noise, t })
}

/// Mean squared error between predicted and true noise.
pub fn eps_loss(den: &Denoiser, items: &[NoisedCrop]) -> Result<f64> {
    let losses: Vec<f64> = items
        .par_iter()
        .map(|c| {
            let pred = den.predict(&c.xt, c.t)?;
            Ok(pred.iter().zip(&c.noise).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Adam on the epsilon-MSE objective; returns the per-step batch loss.
pub fn train_denoiser(
    den: &mut Denoiser,
    clean: &[&Waveform],
    schedule: &DiffusionSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<Vec<f64>> {
    if clean.is_empty() {
        return Err(input_err("empty clean corpus"));
    }
    if cfg.batch_size == 0 || cfg.crop_len == 0 {
        return Err(config_err("batch_size and crop_len must be positive"));
    }
    let mut r = rng::stream(cfg.seed, "denoiser-train", &[]);
    let mut opt = Adam::default();
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| draw_crop(clean, schedule, cfg.crop_len, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let den_ref = &*den;
        let results: Vec<(f64, _)> = batch
            .par_iter()
            .map(|c| -> Result<_> {
                let mut g = Graph::new();
                let p = den_ref.params.bind(&mut g, true);
                let n = c.xt.len();
                let x = g.constant(Tensor::new(vec![1, n], c.xt.clone())?);
                let target = g.constant(Tensor::new(vec![1, n], c.noise.clone())?);
                let pred = den_ref.predict_graph(&mut g, &p, x, c.t)?;
                let diff = g.sub(pred, target)?;
                let sq = g.square(diff)?;
                let loss = g.mean(sq)?;
                let value = g.value(loss).item()?;
                let mut grads = g.backward(loss)?;
                Ok((value, p.collect(&mut grads)))
            })
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(input_err("denoiser loss became non-finite"));
        }
        history.push(loss);
        let grads = average_grads(results.into_iter().map(|r| r.1).collect());
        opt.update(&mut den.params, &grads, cfg.lr)?;
    }
    Ok(history)
}

/// `MSE(x0, x0_hat)` with `x0_hat = (x_t - sqrt(1 - abar) eps_hat) / sqrt(abar)`.
pub fn reconstruction_mse(den: &Denoiser, schedule: &DiffusionSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<f64> {
    if t == 0 {
        return Err(input_err("reconstruction needs t >= 1"));
    }
    let xt = q_sample(schedule, x0, t, noise)?;
    let eps = den.predict(&xt, t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(xt.iter().zip(&eps))
        .map(|(x, (xt, e))| (x - (xt - b * e) / a).powi(2))
        .sum::<f64>()
        / x0.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseMode {
    /// Posterior-mean step plus `sqrt(beta_t) z`, no noise on the last step.
    #[default]
    Ancestral,
    /// Deterministic (eta = 0) implicit update.
    Deterministic,
}

#[derive(Clone, Debug)]
pub struct Purifier {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub mode: ReverseMode,
}

impl Purifier {
    /// Noises `x` to `t_star` and denoises back; `t_star = 0` returns `x` unchanged.
    /// All randomness comes from `seed`.
    pub fn purify(&self, x: &Waveform, t_star: usize, seed: u64) -> Result<Waveform> {
        self.schedule.check_t(t_star)?;
        if t_star == 0 {
            return Ok(x.clone());
        }
        let mut r = rng::stream(seed, "purify", &[t_star as u64]);
        let n = x.len();
        let noise = gaussian(n, &mut r);
        let mut xt = q_sample(&self.schedule, x.samples(), t_star, &noise)?;
        for t in (1..=t_star).rev() {
            let eps = self.denoiser.predict(&xt, t)?;
            let ab = self.schedule.alpha_bar(t);
            match self.mode {
                ReverseMode::Ancestral => {
                    let beta = self.schedule.beta(t);
                    let c = beta / (1.0 - ab).sqrt();
                    let inv = 1.0 / (1.0 - beta).sqrt();
                    let sigma = beta.sqrt();
                    let z = if t > 1 { gaussian(n, &mut r) } else { vec![0.0; n] };
                    for ((v, e), zi) in xt.iter_mut().zip(&eps).zip(&z) {
                        *v = inv * (*v - c * e) + sigma * zi;
                    }
                }
                ReverseMode::Deterministic => {
                    let ab_prev = self.schedule.alpha_bar(t - 1);
                    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                    let (ap, bp) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                    for (v, e) in xt.iter_mut().zip(&eps) {
                        let x0 = (*v - b * e) / a;
                        *v = ap * x0 + bp * e;
                    }
                }
            }
            if xt.iter().any(|v| !v.is_finite()) {
                return Err(input_err(format!("reverse process diverged at step {t}")));
            }
        }
        xt.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(Waveform::new(xt, x.sample_rate()))
    }
}

/// One row of a purification-strength sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: usize,
    pub attack_success: f64,
    pub defense_success: f64,
    pub sim_src: f64,
    pub sim_tgt: f64,
    pub clean_sim: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("t,attack_success,defense_success,sim_src,sim_tgt,clean_sim\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.6},{:.6},{:.6}",
            r.t, r.attack_success, r.defense_success, r.sim_src, r.sim_tgt, r.clean_sim
        );
    }
    s
}

/// Step with the highest net defense (defense success minus attack
/// success); ties resolve to the smaller step.
pub fn select_t_star(rows: &[SweepRow]) -> Result<usize> {
    let net = |r: &SweepRow| r.defense_success - r.attack_success;
    rows.iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if net(b) > net(r) => Some(b),
            Some(b) if net(b) == net(r) && b.t <= r.t => Some(b),
            _ => Some(r),
        })
        .map(|r| r.t)
        .ok_or_else(|| input_err("empty sweep"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(len: usize, freq: f64, sample_rate: u32, amp: f64) -> Waveform {
        let sr = f64::from(sample_rate);
        Waveform::new(
            (0..len)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
                .collect(),
            sample_rate,
        )
    }

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::linear(50, 1e-4, 0.05).unwrap()
    }

    #[test]
    fn schedule_properties() {
        let s = schedule();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
        }
        let mut running = 1.0;
        for t in 1..=50 {
            running *= 1.0 - (1e-4 + (0.05 - 1e-4) * (t - 1) as f64 / 49.0);
        }
        assert!((s.alpha_bar(50) - running).abs() < 1e-12);
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.05).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 0.05).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = schedule();
        let x = vec![0.5, -0.25];
        assert_eq!(q_sample(&s, &x, 0, &[3.0, 4.0]).unwrap(), x);
        let z = q_sample(&s, &x, 10, &[0.0, 0.0]).unwrap();
        assert_eq!(z[0], s.alpha_bar(10).sqrt() * 0.5);
        assert!(q_sample(&s, &x, 51, &[0.0, 0.0]).is_err());
        assert!(q_sample(&s, &x, 1, &[0.0]).is_err());
    }

    #[test]
    fn zero_prediction_loss_is_noise_power() {
        let mut d = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
        let names: Vec<String> = d.params.iter().map(|(n, _)| n.clone()).collect();
        for n in names.iter().filter(|n| n.starts_with("out.")) {
            let shape = d.params.get(n).unwrap().shape().to_vec();
            d.params.insert(n.clone(), Tensor::zeros(shape));
        }
        let s = schedule();
        let mut r = rng::rng(4);
        let w = sine(8000, 200.0, 8000, 0.5);
        let items: Vec<NoisedCrop> = (0..8).map(|_| draw_crop(&[&w], &s, 4000, &mut r).unwrap()).collect();
        let l = eps_loss(&d, &items).unwrap();
        assert!((l - 1.0).abs() < 0.03, "{l}");
    }

    #[test]
    fn purify_identity_and_determinism() {
        let p = Purifier {
            denoiser: Denoiser::new(DenoiserConfig::default(), 1).unwrap(),
            schedule: schedule(),
            mode: ReverseMode::Ancestral,
        };
        let w = sine(400, 300.0, 8000, 0.7);
        assert_eq!(p.purify(&w, 0, 5).unwrap(), w);
        let a = p.purify(&w, 3, 5).unwrap();
        assert_eq!(a, p.purify(&w, 3, 5).unwrap());
        assert_ne!(a, p.purify(&w, 3, 6).unwrap());
        assert!(a.samples().iter().all(|v| v.abs() <= 1.0));
        assert!(p.purify(&w, 51, 5).is_err());
    }

    #[test]
    fn select_prefers_max_net_then_smallest() {
        let row = |t, d| SweepRow {
            t,
            attack_success: 0.0,
            defense_success: d,
            sim_src: 0.0,
            sim_tgt: 0.0,
            clean_sim: 0.0,
        };
        assert_eq!(select_t_star(&[row(0, 1.0), row(2, 5.0), row(4, 5.0), row(8, 3.0)]).unwrap(), 2);
        assert!(select_t_star(&[]).is_err());
        // attack success counts against a step
        let mut hit = row(2, 70.0);
        hit.attack_success = 15.0;
        let mut quiet = row(3, 64.0);
        quiet.attack_success = 6.0;
        assert_eq!(select_t_star(&[row(0, 0.0), hit, quiet]).unwrap(), 3);
        assert!(sweep_csv(&[row(1, 2.0)]).starts_with("t,attack_success"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let d = Denoiser::new(DenoiserConfig::default(), 2).unwrap();
        let back = Denoiser::from_params(&d.to_params()).unwrap();
        assert_eq!(back.params(), d.params());
    }
}
