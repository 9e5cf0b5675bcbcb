//! C interface to `nbody_sciml`.
//!
//! Trajectories and models are opaque handles created by `nb_*` functions
//! and released with the matching `*_free`. Every fallible function returns
//! an [`NbStatus`]; on failure [`nb_last_error_message`] describes the error
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nbody_sciml::datagen::{add_noise, generate_ground_truth, split_prefix, NoiseLevel, SplitSpec, SystemSetup};
use nbody_sciml::dynamics::{gravitational_rhs_into, BodySpec, SystemState};
use nbody_sciml::experiments::forecast_metrics;
use nbody_sciml::integrators::Trajectory;
use nbody_sciml::io::{write_trajectory, Checkpoint};
use nbody_sciml::models::{layer_sizes, Model, ModelKind};
use nbody_sciml::neural::{Activation, MlpSpec, ParamVector};
use nbody_sciml::optimizers::{train_from, FirstOrder, Horizon, Stage1, Stage2, TrainConfig};
use nbody_sciml::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Integration = 3,
    Diverged = 4,
    Mismatch = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbModelKind {
    NeuralOde = 0,
    Ude = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbActivation {
    Tanh = 0,
    Relu = 1,
    Swish = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbOptimizer {
    Adam = 0,
    AdamW = 1,
}

/// Training schedule. Fill with `nb_train_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NbTrainOptions {
    pub optimizer: NbOptimizer,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// L-BFGS iterations after the first-order stage; 0 skips it.
    pub bfgs_iters: usize,
    /// RK4 steps per grid interval.
    pub substeps: usize,
    /// Nonzero grows the fitted window from a short prefix.
    pub grow_horizon: u8,
}

/// A sampled trajectory.
pub struct NbTrajectory {
    inner: Trajectory,
}

/// A model together with its current parameters.
pub struct NbModel {
    model: Model,
    params: ParamVector,
    final_loss: Option<f64>,
    diverged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NbStatus {
    match e.exit_code() {
        2 => NbStatus::InvalidArgument,
        3 => NbStatus::Integration,
        4 => NbStatus::Diverged,
        5 => NbStatus::Mismatch,
        _ => NbStatus::Io,
    }
}

struct Fail(NbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NbStatus::NullPointer, format!("{what} is null"))
}

fn guard<F>(f: F) -> NbStatus
where
    F: FnOnce() -> Result<(), Fail>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NbStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NbStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn traj_ref<'a>(t: *const NbTrajectory, what: &str) -> Result<&'a Trajectory, Fail> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| null(what))
}

fn emit(t: Trajectory, out: *mut *mut NbTrajectory) {
    unsafe { *out = Box::into_raw(Box::new(NbTrajectory { inner: t })) };
}

unsafe fn bodies_arg(masses: *const f64, n_bodies: usize, g: f64, dim: usize) -> Result<BodySpec, Fail> {
    Ok(BodySpec::new(slice(masses, n_bodies, "masses")?.to_vec(), g, dim)?)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// The equal-mass figure-eight sampled at `n_points` times spaced
/// `(t1 - t0) / n_points` from `t0`, in three dimensions.
#[no_mangle]
pub extern "C" fn nb_generate_figure_eight(t0: f64, t1: f64, n_points: usize, out: *mut *mut NbTrajectory) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let setup = SystemSetup {
            t_span: (t0, t1),
            n_points,
            ..SystemSetup::figure_eight()
        };
        setup.validate()?;
        emit(generate_ground_truth(&setup)?, out);
        Ok(())
    })
}

/// Adaptive high-accuracy integration of an arbitrary system.
///
/// # Safety
/// `masses` holds `n_bodies` values and `state0` holds `2 * dim * n_bodies`.
#[no_mangle]
pub unsafe extern "C" fn nb_generate_ground_truth(
    masses: *const f64,
    n_bodies: usize,
    g: f64,
    dim: usize,
    state0: *const f64,
    t0: f64,
    t1: f64,
    n_points: usize,
    out: *mut *mut NbTrajectory,
) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bodies = bodies_arg(masses, n_bodies, g, dim)?;
        let s0 = SystemState::new(slice(state0, bodies.state_len(), "state0")?.to_vec(), dim)?;
        let setup = SystemSetup {
            bodies,
            initial_state: s0,
            t_span: (t0, t1),
            n_points,
        };
        setup.validate()?;
        emit(generate_ground_truth(&setup)?, out);
        Ok(())
    })
}

/// Gaussian noise with standard deviation `fraction` times each
/// component's range.
///
/// # Safety
/// `traj` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nb_add_noise(
    traj: *const NbTrajectory,
    fraction: f64,
    seed: u64,
    out: *mut *mut NbTrajectory,
) -> NbStatus {
    guard(|| {
        let t = traj_ref(traj, "traj")?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit(add_noise(t, &NoiseLevel::new(fraction, seed)?)?, out);
        Ok(())
    })
}

/// Leading `train_fraction` of the samples and the remainder. `test_out`
/// receives null when nothing remains.
///
/// # Safety
/// `traj` is a live handle; both outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn nb_split_prefix(
    traj: *const NbTrajectory,
    train_fraction: f64,
    train_out: *mut *mut NbTrajectory,
    test_out: *mut *mut NbTrajectory,
) -> NbStatus {
    guard(|| {
        let t = traj_ref(traj, "traj")?;
        if train_out.is_null() || test_out.is_null() {
            return Err(null("output"));
        }
        let (train, test) = split_prefix(t, &SplitSpec::new(train_fraction)?)?;
        emit(train, train_out);
        match test {
            Some(test) => emit(test, test_out),
            None => *test_out = ptr::null_mut(),
        }
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `traj` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_trajectory_len(traj: *const NbTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.len())
}

/// Components per sample, or 0 for a null handle.
///
/// # Safety
/// `traj` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_trajectory_state_len(traj: *const NbTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.state_len())
}

/// Copies the sample times into `out`, which holds `capacity` values.
///
/// # Safety
/// `out` is writable for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn nb_trajectory_times(traj: *const NbTrajectory, out: *mut f64, capacity: usize) -> NbStatus {
    guard(|| {
        let t = traj_ref(traj, "traj")?;
        copy_out(t.times(), out, capacity)
    })
}

/// Copies all states, sample-major, into `out`.
///
/// # Safety
/// `out` is writable for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn nb_trajectory_states(traj: *const NbTrajectory, out: *mut f64, capacity: usize) -> NbStatus {
    guard(|| {
        let t = traj_ref(traj, "traj")?;
        let flat: Vec<f64> = t.states().iter().flat_map(|s| s.iter().copied()).collect();
        copy_out(&flat, out, capacity)
    })
}

unsafe fn copy_out(values: &[f64], out: *mut f64, capacity: usize) -> Result<(), Fail> {
    if capacity < values.len() {
        return Err(Fail(
            NbStatus::InvalidArgument,
            format!("buffer holds {capacity} values, need {}", values.len()),
        ));
    }
    slice_mut(out, values.len(), "out")?.copy_from_slice(values);
    Ok(())
}

/// Writes the trajectory as CSV with `dim` spatial dimensions per body.
///
/// # Safety
/// `path` is a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn nb_trajectory_write_csv(traj: *const NbTrajectory, dim: usize, path: *const c_char) -> NbStatus {
    guard(|| {
        let t = traj_ref(traj, "traj")?;
        write_trajectory(&path_arg(path)?, t, dim, None)?;
        Ok(())
    })
}

/// # Safety
/// `traj` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nb_trajectory_free(traj: *mut NbTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Newtonian right-hand side of `state` into `out` (both `2 * dim * n_bodies`).
///
/// # Safety
/// Pointers are valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn nb_gravitational_rhs(
    state: *const f64,
    masses: *const f64,
    n_bodies: usize,
    g: f64,
    dim: usize,
    out: *mut f64,
) -> NbStatus {
    guard(|| {
        let bodies = bodies_arg(masses, n_bodies, g, dim)?;
        let n = bodies.state_len();
        let s = slice(state, n, "state")?;
        let o = slice_mut(out, n, "out")?;
        gravitational_rhs_into(s, &bodies, o)?;
        Ok(())
    })
}

/// Builds a model with hidden widths `hidden[0..n_hidden]`; input and
/// output sizes follow from the kind and the system.
///
/// # Safety
/// `hidden` holds `n_hidden` values and `masses` holds `n_bodies`.
#[no_mangle]
pub unsafe extern "C" fn nb_model_new(
    kind: NbModelKind,
    hidden: *const usize,
    n_hidden: usize,
    activation: NbActivation,
    seed: u64,
    masses: *const f64,
    n_bodies: usize,
    g: f64,
    dim: usize,
    out: *mut *mut NbModel,
) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n_hidden == 0 || hidden.is_null() {
            return Err(Fail(NbStatus::InvalidArgument, "at least one hidden layer is required".into()));
        }
        let hidden = std::slice::from_raw_parts(hidden, n_hidden);
        let bodies = bodies_arg(masses, n_bodies, g, dim)?;
        let kind = match kind {
            NbModelKind::NeuralOde => ModelKind::NeuralOde,
            NbModelKind::Ude => ModelKind::Ude,
        };
        let activation = match activation {
            NbActivation::Tanh => Activation::Tanh,
            NbActivation::Relu => Activation::Relu,
            NbActivation::Swish => Activation::Swish,
        };
        let spec = MlpSpec::new(layer_sizes(kind, &bodies, hidden), activation, seed)?;
        let model = Model::new(kind, spec, bodies)?;
        let params = model.init_params();
        *out = Box::into_raw(Box::new(NbModel {
            model,
            params,
            final_loss: None,
            diverged: false,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_model_param_count(model: *const NbModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.len())
}

/// # Safety
/// `out` is writable for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn nb_model_params(model: *const NbModel, out: *mut f64, capacity: usize) -> NbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        copy_out(m.params.as_slice(), out, capacity)
    })
}

/// Table defaults for `kind`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nb_train_options_default(kind: NbModelKind, out: *mut NbTrainOptions) -> NbStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = TrainConfig::default_for(match kind {
            NbModelKind::NeuralOde => ModelKind::NeuralOde,
            NbModelKind::Ude => ModelKind::Ude,
        });
        *out = NbTrainOptions {
            optimizer: match c.stage1.optimizer {
                FirstOrder::Adam => NbOptimizer::Adam,
                FirstOrder::AdamW => NbOptimizer::AdamW,
            },
            lr: c.stage1.lr,
            epochs: c.stage1.epochs,
            weight_decay: c.stage1.weight_decay,
            bfgs_iters: c.stage2.map_or(0, |s| s.max_iters),
            substeps: c.loss.substeps,
            grow_horizon: c.stage1.horizon.is_some() as u8,
        };
        Ok(())
    })
}

fn train_config(o: &NbTrainOptions) -> TrainConfig {
    let mut c = TrainConfig::ude_default();
    c.stage1 = Stage1 {
        optimizer: match o.optimizer {
            NbOptimizer::Adam => FirstOrder::Adam,
            NbOptimizer::AdamW => FirstOrder::AdamW,
        },
        lr: o.lr,
        epochs: o.epochs,
        weight_decay: o.weight_decay,
        horizon: (o.grow_horizon != 0).then_some(Horizon::DEFAULT),
    };
    c.stage2 = (o.bfgs_iters > 0).then_some(Stage2 { max_iters: o.bfgs_iters });
    c.loss.substeps = o.substeps;
    c
}

/// Trains from the model's current parameters on `data`, integrating from
/// `state0`. `options` may be null for the defaults of the model kind. On
/// `Diverged` the model keeps the best parameters seen.
///
/// # Safety
/// `state0` holds the system's state length; `final_loss` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn nb_model_train(
    model: *mut NbModel,
    data: *const NbTrajectory,
    state0: *const f64,
    options: *const NbTrainOptions,
    final_loss: *mut f64,
) -> NbStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let data = traj_ref(data, "data")?;
        let dim = m.model.bodies().spatial_dim;
        let s0 = SystemState::new(slice(state0, m.model.bodies().state_len(), "state0")?.to_vec(), dim)?;
        let config = match options.as_ref() {
            Some(o) => train_config(o),
            None => TrainConfig::default_for(m.model.kind()),
        };
        let outcome = train_from(&m.model, m.params.clone(), data, &s0, &config)?;
        m.params = outcome.params;
        m.final_loss = outcome.final_loss;
        m.diverged = outcome.diverged.is_some();
        if let Some(fl) = final_loss.as_mut() {
            *fl = outcome.final_loss.unwrap_or(f64::NAN);
        }
        match outcome.diverged {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    })
}

/// Integrates the model from `state0` over the sample times of `grid`.
///
/// # Safety
/// `state0` holds the system's state length.
#[no_mangle]
pub unsafe extern "C" fn nb_model_predict(
    model: *const NbModel,
    state0: *const f64,
    grid: *const NbTrajectory,
    substeps: usize,
    out: *mut *mut NbTrajectory,
) -> NbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let g = traj_ref(grid, "grid")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dim = m.model.bodies().spatial_dim;
        let s0 = SystemState::new(slice(state0, m.model.bodies().state_len(), "state0")?.to_vec(), dim)?;
        emit(m.model.predict(&m.params, &s0, g.grid(), substeps)?, out);
        Ok(())
    })
}

/// # Safety
/// `path` is a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn nb_model_save(model: *const NbModel, path: *const c_char) -> NbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        Checkpoint::new(&m.model, m.params.clone(), m.final_loss, m.diverged)?.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` is a nul-terminated UTF-8 string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nb_model_load(path: *const c_char, out: *mut *mut NbModel) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let model = ck.model()?;
        *out = Box::into_raw(Box::new(NbModel {
            model,
            params: ck.params,
            final_loss: ck.final_loss,
            diverged: ck.diverged,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nb_model_free(model: *mut NbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Aggregate nRMSE of `pred` against `truth`, normalized by the component
/// ranges of `reference` (normally the clean full-length trajectory).
///
/// # Safety
/// Handles are live; `aggregate` is writable.
#[no_mangle]
pub unsafe extern "C" fn nb_nrmse(
    pred: *const NbTrajectory,
    truth: *const NbTrajectory,
    reference: *const NbTrajectory,
    aggregate: *mut f64,
) -> NbStatus {
    guard(|| {
        let p = traj_ref(pred, "pred")?;
        let t = traj_ref(truth, "truth")?;
        let r = traj_ref(reference, "reference")?;
        let out = aggregate.as_mut().ok_or_else(|| null("aggregate"))?;
        *out = forecast_metrics(p, t, &r.component_ranges())?.aggregate;
        Ok(())
    })
}
