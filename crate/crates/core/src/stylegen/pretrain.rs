//! Non-saturating logistic GAN training with a lazy R1 penalty.
//!
//! R1 needs the gradient of `‖∇ₓD(x)‖²` with respect to D's parameters,
//! which is a Hessian-vector product. With `v = ∇ₓD(x)` held fixed,
//! `∇_θ (v · ∇ₓD(x))` is exactly that gradient up to a factor of two, and
//! `v · ∇ₓD(x)` is a directional derivative, taken here by central
//! differences along `v`.

use rand::Rng;
use sfe_tensor::{Adam, AdamConfig, Bound, Graph, Scalar, Tensor, Var};

use super::{Discriminator, Generator, GeneratorConfig, GanTrainConfig, MAPPING_PREFIX};
use crate::error::{CoreError, Result};
use crate::metrics::{MetricsLog, StepRecord};
use crate::rng;

/// Length of the finite-difference step along `∇ₓD`, in pixel units.
const R1_PROBE: f64 = 1e-2;

/// Everything a resumed GAN run needs.
#[derive(Debug, Clone)]
pub struct GanState<T: Scalar> {
    pub g: Generator<T>,
    pub g_ema: Generator<T>,
    pub d: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> GanState<T> {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        let g = Generator::new(config.clone())?;
        let d = Discriminator::new(config.clone())?;
        let lr = config.pretrain.lr;
        Ok(Self {
            g_ema: g.clone(),
            g,
            d,
            opt_g: Adam::new(AdamConfig::new(lr).with_betas(0.0, 0.99))
                .with_lr_mult(MAPPING_PREFIX, config.mapping_lr_mult),
            opt_d: Adam::new(AdamConfig::new(lr).with_betas(0.0, 0.99)),
            step: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GanOutcome {
    pub steps_run: usize,
    pub last: Option<StepRecord>,
}

/// `w: [B, D]` repeated for all `n` layers as `[B, n, D]`.
pub fn broadcast_w<'g, T: Scalar>(w: Var<'g, T>, n: usize) -> Var<'g, T> {
    let (b, d) = (w.dim(0), w.dim(1));
    let row = w.reshape(&[b, 1, d]);
    Var::concat1(&vec![row; n])
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Diverged { step, what: format!("{what} = {v}") })
    }
}

/// `∇ₓ Σ D(x)` for a batch of images.
fn input_gradient<T: Scalar>(d: &Discriminator<T>, x: &Tensor<T>) -> Tensor<T> {
    let g = Graph::new();
    let p = Bound::new(&g, &d.params, false);
    let xv = g.param(x.clone());
    let s = d.forward(&p, xv).sum();
    g.backward(s).take(xv).expect("input reaches the score")
}

/// One discriminator update plus, every `r1_interval` steps, the R1 term.
fn disc_step<T: Scalar>(
    st: &mut GanState<T>,
    cfg: &GanTrainConfig,
    real: &Tensor<T>,
    z: &Tensor<T>,
    rec: &mut StepRecord,
) -> Result<()> {
    let step = st.step;
    let n = st.g.num_layers();
    let b = real.dim(0);
    let r1_now = cfg.r1_gamma > 0.0 && step % cfg.r1_interval.max(1) == 0;
    let probe = if r1_now {
        let v = input_gradient(&st.d, real);
        let row = v.row_len();
        let mut pert = v.clone();
        let mut inv_two_eps = Vec::with_capacity(b);
        let mut sq_sum = 0.0;
        for (i, chunk) in pert.data_mut().chunks_mut(row).enumerate() {
            let nrm2: f64 = v.data()[i * row..(i + 1) * row].iter().map(|x| x.as_f64().powi(2)).sum();
            sq_sum += nrm2;
            let eps = R1_PROBE / nrm2.sqrt().max(1e-12);
            chunk.iter_mut().for_each(|x| *x *= T::lit(eps));
            inv_two_eps.push(T::lit(0.5 / eps));
        }
        rec.values.insert("r1".into(), 0.5 * cfg.r1_gamma * sq_sum / b as f64);
        Some((pert, Tensor::from_vec(&[b], inv_two_eps)?))
    } else {
        None
    };

    let g = Graph::new();
    let pg = Bound::new(&g, &st.g.params, false);
    let pd = Bound::new(&g, &st.d.params, true);
    let w = st.g.forward_mapping(&pg, g.constant(z.clone()));
    let fake = st.g.forward(&pg, broadcast_w(w, n));
    let sf = st.d.forward(&pd, fake);
    let sr = st.d.forward(&pd, g.constant(real.clone()));
    let adv = sf.softplus().mean() + (-sr).softplus().mean();
    let mut loss = adv;
    if let Some((pert, inv)) = probe {
        let plus = st.d.forward(&pd, g.constant(real.add(&pert)));
        let minus = st.d.forward(&pd, g.constant(real.sub(&pert)));
        let dir = (plus - minus) * g.constant(inv);
        let scale = T::lit(cfg.r1_gamma * cfg.r1_interval.max(1) as f64);
        loss = loss + dir.mean().scale(scale);
    }
    rec.values.insert("d_loss".into(), finite(step, "d_loss", adv.item().as_f64())?);
    rec.values.insert("d_real".into(), sr.value().mean().as_f64());
    rec.values.insert("d_fake".into(), sf.value().mean().as_f64());
    let mut grads = g.backward(loss);
    let grads = pd.grads(&mut grads);
    drop(pd);
    drop(pg);
    st.opt_d.step(&mut st.d.params, &grads);
    Ok(())
}

fn gen_step<T: Scalar>(st: &mut GanState<T>, cfg: &GanTrainConfig, z: &Tensor<T>, rec: &mut StepRecord) -> Result<()> {
    let n = st.g.num_layers();
    let g = Graph::new();
    let pg = Bound::new(&g, &st.g.params, true);
    let pd = Bound::new(&g, &st.d.params, false);
    let w = st.g.forward_mapping(&pg, g.constant(z.clone()));
    let fake = st.g.forward(&pg, broadcast_w(w, n));
    let loss = (-st.d.forward(&pd, fake)).softplus().mean();
    rec.values.insert("g_loss".into(), finite(st.step, "g_loss", loss.item().as_f64())?);
    let mut grads = g.backward(loss);
    let mut grads = pg.grads(&mut grads);
    grads.retain(|name, _| !Generator::<T>::is_buffer(name));
    drop(pg);
    drop(pd);
    st.opt_g.step(&mut st.g.params, &grads);
    st.g_ema.params.ema_update(&st.g.params, cfg.ema_decay);
    Ok(())
}

/// Trains until `state.step == until`, drawing real batches from `images`
/// (`[n, 3, R, R]`). `checkpoint` is called every `checkpoint_every` steps.
pub fn pretrain_gan<T: Scalar>(
    st: &mut GanState<T>,
    images: &Tensor<T>,
    seed: u64,
    until: usize,
    log: &mut MetricsLog,
    mut checkpoint: impl FnMut(&GanState<T>) -> Result<()>,
) -> Result<GanOutcome> {
    if images.is_empty() || images.dim(0) == 0 {
        return Err(CoreError::Invalid("GAN training needs a nonempty dataset".into()));
    }
    let cfg = st.g.config.pretrain.clone();
    let n_img = images.dim(0);
    let d = st.g.style_dim();
    let start = st.step;
    let mut last = None;
    while st.step < until {
        let mut rng = rng::stream(seed, "gan", st.step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n_img)).collect();
        let real = images.select_batch(&idx);
        let z_d = Tensor::randn(&[cfg.batch_size, d], 1.0, &mut rng);
        let z_g = Tensor::randn(&[cfg.batch_size, d], 1.0, &mut rng);
        let mut rec = StepRecord::new("gan", st.step);
        disc_step(st, &cfg, &real, &z_d, &mut rec)?;
        gen_step(st, &cfg, &z_g, &mut rec)?;
        st.step += 1;
        if st.step % cfg.log_every.max(1) == 0 || st.step == until {
            log.write(&rec)?;
        }
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && st.step < until {
            log.flush()?;
            checkpoint(st)?;
        }
        last = Some(rec);
    }
    log.flush()?;
    Ok(GanOutcome { steps_run: st.step - start, last })
}
