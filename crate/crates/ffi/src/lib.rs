//! C ABI for the energy field and relaxation engine.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible call
//! returns an [`EnergsStatus`]; on failure a message is available from
//! [`energs_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use energs_core::energy::{total_force, EnergyParams};
use energs_core::field::{read_egsf, write_egsf, FieldBundle};
use energs_core::metrics::{compute_metrics, force_norms};
use energs_core::particles::ParticleSet;
use energs_core::photometric::{PhotometricField, Well};
use energs_core::relax::{run, RelaxConfig, RelaxMode};
use energs_core::validate::canonical;
use energs_core::{Error, Vec3};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    EmptyInput = 6,
    Internal = 7,
}

/// Voxel partition plus its precomputed distance and gradient grids.
pub struct EnergsField {
    inner: FieldBundle,
}

/// Particle positions with alive flags.
pub struct EnergsParticles {
    inner: ParticleSet,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergsParams {
    pub w_occ: f64,
    pub sigma_occ: f64,
    pub w_unk: f64,
    pub sigma_unk: f64,
    pub lambda_free: f64,
    pub delta: f64,
    pub tau: f64,
}

impl From<EnergsParams> for EnergyParams {
    fn from(p: EnergsParams) -> Self {
        EnergyParams {
            w_occ: p.w_occ,
            sigma_occ: p.sigma_occ,
            w_unk: p.w_unk,
            sigma_unk: p.sigma_unk,
            lambda_free: p.lambda_free,
            delta: p.delta,
            tau: p.tau,
        }
    }
}

impl From<EnergyParams> for EnergsParams {
    fn from(p: EnergyParams) -> Self {
        EnergsParams {
            w_occ: p.w_occ,
            sigma_occ: p.sigma_occ,
            w_unk: p.w_unk,
            sigma_unk: p.sigma_unk,
            lambda_free: p.lambda_free,
            delta: p.delta,
            tau: p.tau,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergsWell {
    pub center: [f64; 3],
    pub amplitude: f64,
    pub sigma: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergsRelaxConfig {
    pub eta_mu: f64,
    pub max_step_factor: f64,
    /// Prune period in iterations; 0 disables pruning.
    pub prune_every: usize,
    pub tau_margin: f64,
    pub iterations: usize,
    /// 0 = decoupled, 1 = joint.
    pub mode: u32,
    pub joint_lambda: f64,
    /// Photometric wells for joint mode; may be null when `n_wells` is 0.
    pub wells: *const EnergsWell,
    pub n_wells: usize,
}

/// Interpolated field values at a position. Labels: 1 = OCC, 2 = FREE, 3 = UNK.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergsQuery {
    pub label: u8,
    pub clamped: bool,
    pub d_occ: f64,
    pub d_trust: f64,
    pub d_unk: f64,
    pub grad_occ: [f64; 3],
    pub grad_trust: [f64; 3],
    pub grad_unk: [f64; 3],
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergsSample {
    pub label: u8,
    pub e_occ: f64,
    pub e_unk: f64,
    pub e_free: f64,
    pub e_total: f64,
    pub force: [f64; 3],
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergsMetrics {
    pub leak_pct: f64,
    pub occcov_pct: f64,
    pub margin_m: f64,
    pub thick_m: f64,
    pub num_alive: usize,
    pub force_mean: f64,
    pub force_p50: f64,
    pub force_p95: f64,
    pub force_max: f64,
    pub empty: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EnergsStatus {
    match e {
        Error::InvalidArgument(_) | Error::NonUnitDirection(_) | Error::NonFinitePosition => {
            EnergsStatus::InvalidArgument
        }
        Error::InvalidScene(_) | Error::PoseInsideGeometry(_) | Error::Config(_) => EnergsStatus::Config,
        Error::EmptyInput(_) => EnergsStatus::EmptyInput,
        Error::Format(_) | Error::Json(_) => EnergsStatus::Format,
        Error::Io(_) => EnergsStatus::Io,
    }
}

fn fail(status: EnergsStatus, msg: impl Into<String>) -> EnergsStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), EnergsStatus>) -> EnergsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EnergsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(EnergsStatus::Internal, "panic inside energs"),
    }
}

fn lift<T>(r: energs_core::Result<T>) -> Result<T, EnergsStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, EnergsStatus> {
    p.as_ref().ok_or_else(|| fail(EnergsStatus::NullPointer, "null pointer argument"))
}

unsafe fn deref_mut<'a, T>(p: *mut T) -> Result<&'a mut T, EnergsStatus> {
    p.as_mut().ok_or_else(|| fail(EnergsStatus::NullPointer, "null pointer argument"))
}

fn nonnull<T>(p: *const T) -> Result<(), EnergsStatus> {
    if p.is_null() {
        Err(fail(EnergsStatus::NullPointer, "null pointer argument"))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<String, EnergsStatus> {
    if p.is_null() {
        return Err(fail(EnergsStatus::NullPointer, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(EnergsStatus::InvalidArgument, "path is not UTF-8"))
}

fn vec3(v: Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn energs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn energs_status_str(status: EnergsStatus) -> *const c_char {
    let s: &'static CStr = match status {
        EnergsStatus::Ok => c"ok",
        EnergsStatus::NullPointer => c"null pointer",
        EnergsStatus::InvalidArgument => c"invalid argument",
        EnergsStatus::Config => c"invalid configuration",
        EnergsStatus::Io => c"i/o error",
        EnergsStatus::Format => c"malformed input",
        EnergsStatus::EmptyInput => c"empty input",
        EnergsStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn energs_params_default() -> EnergsParams {
    EnergyParams::default().into()
}

#[no_mangle]
pub extern "C" fn energs_relax_config_default() -> EnergsRelaxConfig {
    let d = RelaxConfig::default();
    EnergsRelaxConfig {
        eta_mu: d.eta_mu,
        max_step_factor: d.max_step_factor,
        prune_every: d.prune_every.unwrap_or(0),
        tau_margin: d.tau_margin,
        iterations: d.iterations,
        mode: 0,
        joint_lambda: d.joint_lambda,
        wells: ptr::null(),
        n_wells: 0,
    }
}

/// Build the field of the default street canyon with seed 0 and 0.25 m voxels.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn energs_field_canonical(out: *mut *mut EnergsField) -> EnergsStatus {
    guard(|| {
        let out = deref_mut(out)?;
        let sb = lift(canonical())?;
        *out = Box::into_raw(Box::new(EnergsField { inner: sb.bundle }));
        Ok(())
    })
}

/// Load a field from a grid dump file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn energs_field_load(path: *const c_char, out: *mut *mut EnergsField) -> EnergsStatus {
    guard(|| {
        let out = deref_mut(out)?;
        let path = path_arg(path)?;
        let file = File::open(&path).map_err(|e| fail(EnergsStatus::Io, format!("{path}: {e}")))?;
        let inner = lift(read_egsf(BufReader::new(file)))?;
        *out = Box::into_raw(Box::new(EnergsField { inner }));
        Ok(())
    })
}

/// Write a field as a grid dump file.
///
/// # Safety
/// `field` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn energs_field_save(field: *const EnergsField, path: *const c_char) -> EnergsStatus {
    guard(|| {
        let field = deref(field)?;
        let path = path_arg(path)?;
        let mut buf = Vec::new();
        lift(write_egsf(&field.inner, &mut buf))?;
        std::fs::write(&path, buf).map_err(|e| fail(EnergsStatus::Io, format!("{path}: {e}")))
    })
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn energs_field_free(field: *mut EnergsField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Grid dimensions, voxel size and origin.
///
/// # Safety
/// `field` must be a live handle; `dims` and `origin` must point to 3
/// writable elements, `voxel_size` to one.
#[no_mangle]
pub unsafe extern "C" fn energs_field_geometry(
    field: *const EnergsField,
    dims: *mut usize,
    voxel_size: *mut f64,
    origin: *mut f64,
) -> EnergsStatus {
    guard(|| {
        let field = deref(field)?;
        nonnull(dims)?;
        nonnull(origin)?;
        let voxel_size = deref_mut(voxel_size)?;
        let d = field.inner.dims();
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&[d.nx, d.ny, d.nz]);
        *voxel_size = field.inner.voxel_size();
        std::slice::from_raw_parts_mut(origin, 3).copy_from_slice(&vec3(field.inner.frame().origin));
        Ok(())
    })
}

/// Voxel counts as OCC, FREE, UNK.
///
/// # Safety
/// `field` must be a live handle; `counts` must point to 3 writable elements.
#[no_mangle]
pub unsafe extern "C" fn energs_field_label_counts(field: *const EnergsField, counts: *mut usize) -> EnergsStatus {
    guard(|| {
        let field = deref(field)?;
        nonnull(counts)?;
        std::slice::from_raw_parts_mut(counts, 3).copy_from_slice(&field.inner.partition.counts());
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle, `pos` must point to 3 readable elements and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn energs_field_query(
    field: *const EnergsField,
    pos: *const f64,
    out: *mut EnergsQuery,
) -> EnergsStatus {
    guard(|| {
        let field = deref(field)?;
        nonnull(pos)?;
        let out = deref_mut(out)?;
        let p = std::slice::from_raw_parts(pos, 3);
        let q = lift(field.inner.query(Vec3::new(p[0], p[1], p[2])))?;
        *out = EnergsQuery {
            label: q.label.code(),
            clamped: q.clamped,
            d_occ: q.d_occ,
            d_trust: q.d_trust,
            d_unk: q.d_unk,
            grad_occ: vec3(q.grad_occ),
            grad_trust: vec3(q.grad_trust),
            grad_unk: vec3(q.grad_unk),
        };
        Ok(())
    })
}

/// Energy terms and geometric force at a position.
///
/// # Safety
/// `field` and `params` must be valid, `pos` must point to 3 readable
/// elements and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn energs_total_force(
    field: *const EnergsField,
    params: *const EnergsParams,
    pos: *const f64,
    out: *mut EnergsSample,
) -> EnergsStatus {
    guard(|| {
        let field = deref(field)?;
        let params: EnergyParams = (*deref(params)?).into();
        nonnull(pos)?;
        let out = deref_mut(out)?;
        let p = std::slice::from_raw_parts(pos, 3);
        let s = lift(total_force(&field.inner, Vec3::new(p[0], p[1], p[2]), &params))?;
        *out = EnergsSample {
            label: s.label.code(),
            e_occ: s.e_occ,
            e_unk: s.e_unk,
            e_free: s.e_free,
            e_total: s.e_total,
            force: vec3(s.force),
        };
        Ok(())
    })
}

/// Create a particle set from `n` packed `x y z` triples.
///
/// # Safety
/// `positions` must point to `3 * n` readable elements (may be null when
/// `n` is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn energs_particles_new(
    positions: *const f64,
    n: usize,
    out: *mut *mut EnergsParticles,
) -> EnergsStatus {
    guard(|| {
        let out = deref_mut(out)?;
        let flat: &[f64] = if n == 0 {
            &[]
        } else {
            nonnull(positions)?;
            std::slice::from_raw_parts(positions, 3 * n)
        };
        let pts: Vec<Vec3> = flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        if !pts.iter().all(|p| p.is_finite()) {
            return Err(fail(EnergsStatus::InvalidArgument, "non-finite particle position"));
        }
        *out = Box::into_raw(Box::new(EnergsParticles { inner: ParticleSet::new(pts) }));
        Ok(())
    })
}

/// # Safety
/// `particles` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn energs_particles_free(particles: *mut EnergsParticles) {
    if !particles.is_null() {
        drop(Box::from_raw(particles));
    }
}

/// Total particle count, dead ones included; 0 for a null handle.
///
/// # Safety
/// `particles` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn energs_particles_len(particles: *const EnergsParticles) -> usize {
    particles.as_ref().map_or(0, |p| p.inner.len())
}

/// # Safety
/// `particles` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn energs_particles_alive_count(particles: *const EnergsParticles) -> usize {
    particles.as_ref().map_or(0, |p| p.inner.alive_count())
}

/// Copy positions (`3 * len` values) and alive flags (`len` values, 1 =
/// alive) out of the set. Either output may be null.
///
/// # Safety
/// `particles` must be a live handle and each non-null output must have room
/// for the number of elements given above.
#[no_mangle]
pub unsafe extern "C" fn energs_particles_read(
    particles: *const EnergsParticles,
    positions: *mut f64,
    alive: *mut u8,
) -> EnergsStatus {
    guard(|| {
        let ps = &deref(particles)?.inner;
        if !positions.is_null() {
            let out = std::slice::from_raw_parts_mut(positions, 3 * ps.len());
            for (c, p) in out.chunks_exact_mut(3).zip(&ps.positions) {
                c.copy_from_slice(&vec3(*p));
            }
        }
        if !alive.is_null() {
            let out = std::slice::from_raw_parts_mut(alive, ps.len());
            for (o, &a) in out.iter_mut().zip(&ps.alive) {
                *o = a as u8;
            }
        }
        Ok(())
    })
}

/// Relax the particle set in place. `final_energy` (may be null) receives
/// the total energy of the alive particles after the last iteration.
///
/// # Safety
/// All handles and pointers must be valid; `cfg.wells` must point to
/// `cfg.n_wells` readable wells when `n_wells` is nonzero.
#[no_mangle]
pub unsafe extern "C" fn energs_relax(
    field: *const EnergsField,
    params: *const EnergsParams,
    cfg: *const EnergsRelaxConfig,
    particles: *mut EnergsParticles,
    final_energy: *mut f64,
) -> EnergsStatus {
    guard(|| {
        let field = deref(field)?;
        let params: EnergyParams = (*deref(params)?).into();
        let c = *deref(cfg)?;
        let ps = &mut deref_mut(particles)?.inner;
        let mode = match c.mode {
            0 => RelaxMode::Decoupled,
            1 => RelaxMode::Joint,
            m => return Err(fail(EnergsStatus::InvalidArgument, format!("unknown relax mode {m}"))),
        };
        let photometric = if c.n_wells == 0 {
            None
        } else {
            nonnull(c.wells)?;
            let wells = std::slice::from_raw_parts(c.wells, c.n_wells)
                .iter()
                .map(|w| Well { center: Vec3::new(w.center[0], w.center[1], w.center[2]), amplitude: w.amplitude, sigma: w.sigma })
                .collect();
            let f = PhotometricField { wells };
            lift(f.validate())?;
            Some(f)
        };
        let cfg = RelaxConfig {
            eta_mu: c.eta_mu,
            max_step_factor: c.max_step_factor,
            prune_every: (c.prune_every > 0).then_some(c.prune_every),
            tau_margin: c.tau_margin,
            iterations: c.iterations,
            mode,
            joint_lambda: c.joint_lambda,
            photometric,
        };
        lift(cfg.validate())?;
        let log = lift(run(ps, &field.inner, &params, &cfg))?;
        if let Some(e) = final_energy.as_mut() {
            *e = log.rows.last().map_or(0.0, |r| r.total_energy);
        }
        Ok(())
    })
}

/// Geometric metrics of the alive particles.
///
/// # Safety
/// All handles and pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn energs_metrics(
    field: *const EnergsField,
    params: *const EnergsParams,
    particles: *const EnergsParticles,
    out: *mut EnergsMetrics,
) -> EnergsStatus {
    guard(|| {
        let field = deref(field)?;
        let params: EnergyParams = (*deref(params)?).into();
        let ps = &deref(particles)?.inner;
        let out = deref_mut(out)?;
        let norms = lift(force_norms(ps, &field.inner, &params))?;
        let r = lift(compute_metrics(ps, &field.inner, &norms))?;
        *out = EnergsMetrics {
            leak_pct: r.leak_pct,
            occcov_pct: r.occcov_pct,
            margin_m: r.margin_m,
            thick_m: r.thick_m,
            num_alive: r.num_alive,
            force_mean: r.force.mean,
            force_p50: r.force.p50,
            force_p95: r.force.p95,
            force_max: r.force.max,
            empty: r.empty,
        };
        Ok(())
    })
}
