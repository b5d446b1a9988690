//! C ABI over the `videdit` core.
//!
//! Every object crosses the boundary as an opaque pointer owned by the caller
//! and released with its `*_free` function. Every fallible call returns a
//! [`VideditStatus`]; on failure the message is available from
//! [`videdit_last_error`] on the same thread. Panics are caught and reported as
//! [`VideditStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use videdit::config::{RunConfig, SceneRef};
use videdit::denoiser::ToyUNet;
use videdit::frames::{read_frames, write_frames};
use videdit::inversion::{invert, InversionRecord};
use videdit::pipeline::{edit_video, reconstruct, EditConfig};
use videdit::schedule::Schedule;
use videdit::toyworld::{render_scene, SceneSpec, ToyTextEncoder};
use videdit::{Error, VideoTensor};

/// Result of every fallible call. The numeric values match the exit codes of
/// the `videdit` command-line tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideditStatus {
    Ok = 0,
    /// A panic inside the library.
    Internal = 1,
    /// Null pointer, invalid UTF-8 or a buffer of the wrong size.
    InvalidArgument = 2,
    Config = 3,
    MissingArtifact = 4,
    InvalidInput = 5,
    Numeric = 6,
    Io = 7,
}

impl From<&Error> for VideditStatus {
    fn from(e: &Error) -> Self {
        match videdit::cli::exit_code(e) {
            3 => VideditStatus::Config,
            4 => VideditStatus::MissingArtifact,
            5 => VideditStatus::InvalidInput,
            6 => VideditStatus::Numeric,
            7 => VideditStatus::Io,
            _ => VideditStatus::Internal,
        }
    }
}

/// Configuration, noise schedule, text encoder and (once loaded) denoiser.
pub struct VideditSession {
    cfg: RunConfig,
    schedule: Schedule,
    encoder: ToyTextEncoder,
    model: Option<ToyUNet>,
}

/// A video of shape `[frames, channels, height, width]` with pixel values in `[0, 1]`.
pub struct VideditVideo(VideoTensor);

/// Result of inverting a video: latent trajectory plus per-step null embeddings.
pub struct VideditRecord(InversionRecord);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes were removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(VideditStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(VideditStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VideditStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VideditStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            VideditStatus::Internal
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    opt_str(p, what)?.ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn req_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

impl VideditSession {
    fn model(&self) -> Result<&ToyUNet, Fail> {
        self.model
            .as_ref()
            .ok_or_else(|| Fail(VideditStatus::MissingArtifact, "no denoiser loaded in this session".into()))
    }

    fn install(&mut self, model: ToyUNet) -> Result<(), Fail> {
        if model.config().text_dim != self.encoder.dim() {
            return Err(Fail(
                VideditStatus::Config,
                format!(
                    "encoder.dim ({}) does not match the checkpoint's text_dim ({})",
                    self.encoder.dim(),
                    model.config().text_dim
                ),
            ));
        }
        self.model = Some(model);
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn videdit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, human-readable name of a status code.
#[no_mangle]
pub extern "C" fn videdit_status_name(status: VideditStatus) -> *const c_char {
    let s: &'static CStr = match status {
        VideditStatus::Ok => c"ok",
        VideditStatus::Internal => c"internal error",
        VideditStatus::InvalidArgument => c"invalid argument",
        VideditStatus::Config => c"invalid configuration",
        VideditStatus::MissingArtifact => c"missing artifact",
        VideditStatus::InvalidInput => c"invalid input data",
        VideditStatus::Numeric => c"numerical failure",
        VideditStatus::Io => c"I/O or format error",
    };
    s.as_ptr()
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn videdit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a session from a TOML run configuration. A null `config_toml`
/// selects the defaults. No denoiser is loaded yet.
///
/// # Safety
/// `config_toml` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_session_new(config_toml: *const c_char, out: *mut *mut VideditSession) -> VideditStatus {
    guard(|| {
        let cfg = match opt_str(config_toml, "config_toml")? {
            Some(text) => RunConfig::from_toml(text)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        let session = VideditSession { schedule: cfg.schedule()?, encoder: cfg.encoder()?, cfg, model: None };
        put(out, session)
    })
}

/// # Safety
/// `session` must be null or a pointer returned by [`videdit_session_new`].
#[no_mangle]
pub unsafe extern "C" fn videdit_session_free(session: *mut VideditSession) {
    free(session)
}

/// Loads a denoiser checkpoint. A null `path` uses the configured checkpoint path.
///
/// # Safety
/// `session` must be a live session; `path` null or a valid C string.
#[no_mangle]
pub unsafe extern "C" fn videdit_session_load_model(session: *mut VideditSession, path: *const c_char) -> VideditStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| invalid("session is null"))?;
        let path = match opt_str(path, "path")? {
            Some(p) => PathBuf::from(p),
            None => s.cfg.checkpoint_path(),
        };
        let model = ToyUNet::load(&path)?;
        s.install(model)
    })
}

/// Installs a freshly initialized (untrained) denoiser built from the
/// configuration's `[model]` section. Useful for wiring tests.
///
/// # Safety
/// `session` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn videdit_session_init_model(session: *mut VideditSession) -> VideditStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| invalid("session is null"))?;
        let model = ToyUNet::new(s.cfg.model.clone())?;
        s.install(model)
    })
}

/// Number of DDIM steps of the session's schedule.
///
/// # Safety
/// `session` must be null or a live session. Returns 0 for null.
#[no_mangle]
pub unsafe extern "C" fn videdit_session_num_steps(session: *const VideditSession) -> usize {
    session.as_ref().map_or(0, |s| s.schedule.num_inference_steps())
}

/// Creates a video by copying `len` values laid out as `[frames][channels][height][width]`.
///
/// # Safety
/// `data` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_video_new(
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut VideditVideo,
) -> VideditStatus {
    guard(|| {
        if data.is_null() {
            return Err(invalid("data is null"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        put(out, VideditVideo(VideoTensor::new([frames, channels, height, width], values)?))
    })
}

/// # Safety
/// `video` must be null or a pointer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn videdit_video_free(video: *mut VideditVideo) {
    free(video)
}

/// Writes `[frames, channels, height, width]` into `shape`.
///
/// # Safety
/// `video` must be live; `shape` must point to 4 writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn videdit_video_shape(video: *const VideditVideo, shape: *mut usize) -> VideditStatus {
    guard(|| {
        let v = req_ref(video, "video")?;
        if shape.is_null() {
            return Err(invalid("shape is null"));
        }
        std::slice::from_raw_parts_mut(shape, 4).copy_from_slice(&v.0.shape());
        Ok(())
    })
}

/// Copies the video's values into `buf`, which must hold exactly the number of
/// elements given by the product of its shape.
///
/// # Safety
/// `video` must be live; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn videdit_video_copy_data(video: *const VideditVideo, buf: *mut f64, len: usize) -> VideditStatus {
    guard(|| {
        let v = req_ref(video, "video")?;
        if buf.is_null() {
            return Err(invalid("buf is null"));
        }
        if len != v.0.len() {
            return Err(invalid(format!("buffer holds {len} values, video has {}", v.0.len())));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(v.0.data());
        Ok(())
    })
}

/// Reads a directory of numbered PNG frames.
///
/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_video_read(dir: *const c_char, out: *mut *mut VideditVideo) -> VideditStatus {
    guard(|| {
        let dir = req_str(dir, "dir")?;
        put(out, VideditVideo(read_frames(dir.as_ref())?))
    })
}

/// Writes the video as `dir/0000.png`, `dir/0001.png`, ...
///
/// # Safety
/// `video` must be live; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn videdit_video_write(video: *const VideditVideo, dir: *const c_char) -> VideditStatus {
    guard(|| {
        let v = req_ref(video, "video")?;
        let dir = req_str(dir, "dir")?;
        write_frames(&v.0, dir.as_ref())?;
        Ok(())
    })
}

/// Renders the configured toy scene with the configuration's seed.
///
/// # Safety
/// `session` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_render(session: *const VideditSession, out: *mut *mut VideditVideo) -> VideditStatus {
    guard(|| {
        let s = req_ref(session, "session")?;
        let scene = SceneRef {
            spec: SceneSpec { size: s.cfg.model.image_size, ..s.cfg.dataset.template.clone() },
            seed: s.cfg.seed,
        };
        let (video, _) = render_scene(&scene.spec, scene.seed)?;
        put(out, VideditVideo(video))
    })
}

/// Inverts a pixel-range video under `source_prompt` (null uses the configured
/// source prompt), including null-text optimization.
///
/// # Safety
/// `session` and `video` must be live; `source_prompt` null or a valid C
/// string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_invert(
    session: *const VideditSession,
    video: *const VideditVideo,
    source_prompt: *const c_char,
    out: *mut *mut VideditRecord,
) -> VideditStatus {
    guard(|| {
        let s = req_ref(session, "session")?;
        let v = req_ref(video, "video")?;
        let prompt = opt_str(source_prompt, "source_prompt")?.unwrap_or(&s.cfg.source_prompt);
        let model = s.model()?;
        let ctx = s.cfg.attention.context(model)?;
        let rec = invert(
            &v.0.to_model_range(),
            prompt,
            &s.encoder.encode(prompt),
            &s.encoder.empty(),
            model,
            &model.fingerprint(),
            &s.schedule,
            &ctx,
            &s.cfg.null_text,
        )?;
        put(out, VideditRecord(rec))
    })
}

/// # Safety
/// `record` must be null or a pointer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn videdit_record_free(record: *mut VideditRecord) {
    free(record)
}

/// Number of DDIM steps stored in the record, 0 for null.
///
/// # Safety
/// `record` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn videdit_record_num_steps(record: *const VideditRecord) -> usize {
    record.as_ref().map_or(0, |r| r.0.num_steps())
}

/// Saves the record as a directory (`record.bin` plus `manifest.toml`).
///
/// # Safety
/// `record` must be live; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn videdit_record_save(record: *const VideditRecord, dir: *const c_char) -> VideditStatus {
    guard(|| {
        let r = req_ref(record, "record")?;
        r.0.save(req_str(dir, "dir")?.as_ref(), None)?;
        Ok(())
    })
}

/// Loads a record directory written by [`videdit_record_save`] or the CLI.
///
/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_record_load(dir: *const c_char, out: *mut *mut VideditRecord) -> VideditStatus {
    guard(|| {
        let rec = InversionRecord::load(req_str(dir, "dir")?.as_ref())?;
        put(out, VideditRecord(rec))
    })
}

fn check_record(s: &VideditSession, r: &InversionRecord) -> Result<(), Fail> {
    r.check_schedule(&s.schedule)?;
    let model = s.model()?;
    if !r.model_hash.is_empty() && r.model_hash != model.fingerprint() {
        return Err(Fail(VideditStatus::InvalidInput, "record was computed with a different denoiser".into()));
    }
    Ok(())
}

/// Reconstructs the source video from a record with the configured guidance.
///
/// # Safety
/// `session` and `record` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_reconstruct(
    session: *const VideditSession,
    record: *const VideditRecord,
    out: *mut *mut VideditVideo,
) -> VideditStatus {
    guard(|| {
        let s = req_ref(session, "session")?;
        let r = &req_ref(record, "record")?.0;
        check_record(s, r)?;
        let model = s.model()?;
        let ctx = s.cfg.attention.context(model)?;
        let cond = s.encoder.encode(&r.source_prompt);
        let rec = reconstruct(r, &cond, model, &s.schedule, s.cfg.edit.guidance_scale, &ctx)?;
        put(out, VideditVideo(rec.video.to_pixel_range()))
    })
}

/// Edits the recorded video toward `target_prompt` (null uses the configured
/// target) with the configured injection thresholds and guidance.
///
/// # Safety
/// `session` and `record` must be live; `target_prompt` null or a valid C
/// string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn videdit_edit(
    session: *const VideditSession,
    record: *const VideditRecord,
    target_prompt: *const c_char,
    out: *mut *mut VideditVideo,
) -> VideditStatus {
    guard(|| {
        let s = req_ref(session, "session")?;
        let r = &req_ref(record, "record")?.0;
        check_record(s, r)?;
        let model = s.model()?;
        let ctx = s.cfg.attention.context(model)?;
        let cfg = EditConfig {
            target_prompt: opt_str(target_prompt, "target_prompt")?.map_or(s.cfg.edit.target_prompt.clone(), str::to_owned),
            ..s.cfg.edit.clone()
        };
        let res = edit_video(
            r,
            &s.encoder.encode(&r.source_prompt),
            &s.encoder.encode(&cfg.target_prompt),
            &s.encoder.empty(),
            &cfg,
            model,
            &s.schedule,
            &ctx,
        )?;
        put(out, VideditVideo(res.edited_video))
    })
}
