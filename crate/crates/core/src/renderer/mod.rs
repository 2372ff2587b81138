//! Sandboxed rendering: executes rendering code in a subprocess under a
//! policy (timeout, output caps, private working directory), validates the
//! produced image container, and drives the repair loop that sends failing
//! code plus its error log back to the code editor.

pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::RenderSpec;

/// Environment variable overriding where sandbox scratch directories live.
pub const SANDBOX_TMP_ENV: &str = "CURATOR_SANDBOX_TMP";

/// Extra time allowed for kill + cleanup beyond the configured timeout.
const GRACE: Duration = Duration::from_millis(1500);

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("renderer profile '{0}' not found")]
    ProfileNotFound(String),
    #[error("invalid sandbox policy: {0}")]
    Policy(String),
    #[error("sandbox setup failure: {0}")]
    Sandbox(String),
    #[error("code editor backend failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How one render attempt ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStatus {
    Ok,
    SyntaxError,
    RuntimeError,
    Timeout,
    EmptyOutput,
}

#[derive(Debug, Clone)]
pub struct RenderOutcome {
    pub status: RenderStatus,
    pub image_bytes: Option<Vec<u8>>,
    pub stderr_log: String,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RendererProfile {
    /// Whitespace-split command template with exactly one `{code}` and one
    /// `{output}` placeholder, e.g. `python3 {code} {output}`.
    pub command: String,
    pub timeout_ms: u64,
    /// Injected ahead of the program text; profiles use this to pin seeds.
    #[serde(default)]
    pub preamble: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandboxPolicy {
    pub profiles: BTreeMap<String, RendererProfile>,
    #[serde(default = "default_max_output_bytes")]
    pub max_output_bytes: u64,
    #[serde(default = "default_min_output_bytes")]
    pub min_output_bytes: u64,
    /// Run each render in a fresh private scratch directory.
    #[serde(default = "default_true")]
    pub isolate_working_dir: bool,
    /// Best-effort: scrub the environment so renderers see no proxy or
    /// credential variables. Subprocess sandboxing, not a container.
    #[serde(default = "default_true")]
    pub network_disabled: bool,
    #[serde(default)]
    pub temp_root: Option<PathBuf>,
}

fn default_max_output_bytes() -> u64 {
    16 * 1024 * 1024
}

fn default_min_output_bytes() -> u64 {
    8
}

fn default_true() -> bool {
    true
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        SandboxPolicy {
            profiles: BTreeMap::new(),
            max_output_bytes: default_max_output_bytes(),
            min_output_bytes: default_min_output_bytes(),
            isolate_working_dir: true,
            network_disabled: true,
            temp_root: None,
        }
    }
}

impl SandboxPolicy {
    pub fn validate(&self) -> Result<(), RenderError> {
        for (name, profile) in &self.profiles {
            if profile.timeout_ms == 0 {
                return Err(RenderError::Policy(format!(
                    "profile '{name}' has zero timeout"
                )));
            }
            let code_slots = profile.command.matches("{code}").count();
            let out_slots = profile.command.matches("{output}").count();
            if code_slots != 1 || out_slots != 1 {
                return Err(RenderError::Policy(format!(
                    "profile '{name}' command must contain exactly one {{code}} and one {{output}} placeholder"
                )));
            }
        }
        if self.min_output_bytes > self.max_output_bytes {
            return Err(RenderError::Policy(
                "min_output_bytes exceeds max_output_bytes".into(),
            ));
        }
        Ok(())
    }

    fn scratch_root(&self) -> PathBuf {
        resolve_scratch_root(std::env::var(SANDBOX_TMP_ENV).ok(), &self.temp_root)
    }
}

/// Scratch-dir resolution order: env override, then the configured root,
/// then the system temp dir.
fn resolve_scratch_root(env_override: Option<String>, configured: &Option<PathBuf>) -> PathBuf {
    match env_override {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.clone().unwrap_or_else(std::env::temp_dir),
    }
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Executes the rendering program under the policy. Program failures come
/// back inside [`RenderOutcome`]; only profile/sandbox problems are errors.
pub fn render(spec: &RenderSpec, policy: &SandboxPolicy) -> Result<RenderOutcome, RenderError> {
    policy.validate()?;
    let profile = policy
        .profiles
        .get(&spec.renderer_profile)
        .ok_or_else(|| RenderError::ProfileNotFound(spec.renderer_profile.clone()))?;

    let scratch = policy.scratch_root().join(format!(
        "render-{}-{}",
        std::process::id(),
        SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&scratch)
        .map_err(|e| RenderError::Sandbox(format!("cannot create scratch dir: {e}")))?;
    let result = render_in_scratch(spec, profile, policy, &scratch);
    let _ = fs::remove_dir_all(&scratch);
    result
}

fn render_in_scratch(
    spec: &RenderSpec,
    profile: &RendererProfile,
    policy: &SandboxPolicy,
    scratch: &PathBuf,
) -> Result<RenderOutcome, RenderError> {
    let ext = if spec.language_tag.chars().all(|c| c.is_ascii_alphanumeric())
        && !spec.language_tag.is_empty()
    {
        spec.language_tag.as_str()
    } else {
        "txt"
    };
    let code_path = scratch.join(format!("program.{ext}"));
    let output_path = scratch.join("output.img");
    let stderr_path = scratch.join("stderr.log");

    let mut program = String::new();
    if let Some(preamble) = &profile.preamble {
        program.push_str(preamble);
        program.push('\n');
    }
    program.push_str(&spec.source_text);
    fs::write(&code_path, &program)?;

    let args: Vec<String> = profile
        .command
        .split_whitespace()
        .map(|tok| {
            tok.replace("{code}", &code_path.to_string_lossy())
                .replace("{output}", &output_path.to_string_lossy())
        })
        .collect();
    if args.is_empty() {
        return Err(RenderError::Policy("empty command template".into()));
    }

    let stderr_file = fs::File::create(&stderr_path)?;
    let mut cmd = Command::new(&args[0]);
    cmd.args(&args[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::from(stderr_file));
    if policy.isolate_working_dir {
        cmd.current_dir(scratch);
    }
    if policy.network_disabled {
        cmd.env_clear();
        cmd.env("PATH", "/usr/local/bin:/usr/bin:/bin");
    }
    cmd.env("HOME", scratch);
    cmd.env("TMPDIR", scratch);
    cmd.env("OUTPUT", &output_path);

    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }

    let start = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| RenderError::Sandbox(format!("cannot spawn '{}': {e}", args[0])))?;

    let timeout = Duration::from_millis(profile.timeout_ms);
    let mut timed_out = false;
    loop {
        match child.try_wait()? {
            Some(_) => break,
            None => {
                if start.elapsed() >= timeout {
                    timed_out = true;
                    kill_tree(&mut child);
                    let deadline = Instant::now() + GRACE;
                    while child.try_wait()?.is_none() && Instant::now() < deadline {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    let _ = child.kill();
                    let _ = child.wait();
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
    let wall_time = start.elapsed();
    let status_code = if timed_out {
        None
    } else {
        child.wait()?.code()
    };

    // Scratch paths are per-run; canonicalize them so error logs (which feed
    // repair prompts and failure notices) are reproducible across runs.
    let stderr_log =
        read_truncated(&stderr_path, 64 * 1024).replace(&*scratch.to_string_lossy(), "<sandbox>");

    if timed_out {
        return Ok(RenderOutcome {
            status: RenderStatus::Timeout,
            image_bytes: None,
            stderr_log,
            wall_time,
        });
    }

    if status_code != Some(0) {
        let lowered = stderr_log.to_lowercase();
        let status = if lowered.contains("syntax error") || lowered.contains("syntaxerror") {
            RenderStatus::SyntaxError
        } else {
            RenderStatus::RuntimeError
        };
        return Ok(RenderOutcome {
            status,
            image_bytes: None,
            stderr_log,
            wall_time,
        });
    }

    let bytes = fs::read(&output_path).unwrap_or_default();
    if bytes.is_empty() {
        return Ok(RenderOutcome {
            status: RenderStatus::EmptyOutput,
            image_bytes: None,
            stderr_log,
            wall_time,
        });
    }
    Ok(RenderOutcome {
        status: RenderStatus::Ok,
        image_bytes: Some(bytes),
        stderr_log,
        wall_time,
    })
}

fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    unsafe {
        // The child leads its own process group, so this reaches grandchildren.
        libc::killpg(child.id() as i32, libc::SIGKILL);
    }
    let _ = child.kill();
}

fn read_truncated(path: &PathBuf, cap: usize) -> String {
    match fs::read(path) {
        Ok(mut bytes) => {
            bytes.truncate(cap);
            String::from_utf8_lossy(&bytes).into_owned()
        }
        Err(_) => String::new(),
    }
}

/// Result of container validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validation {
    pub pass: bool,
    pub reason: Option<String>,
}

impl Validation {
    fn pass() -> Self {
        Validation {
            pass: true,
            reason: None,
        }
    }

    fn fail(reason: impl Into<String>) -> Self {
        Validation {
            pass: false,
            reason: Some(reason.into()),
        }
    }
}

/// Pass iff the render succeeded and the bytes carry a supported image
/// container (PNG by magic, SVG by XML well-formedness) within the policy's
/// size bounds. Total function: never errors.
pub fn validate(outcome: &RenderOutcome, policy: &SandboxPolicy) -> Validation {
    match outcome.status {
        RenderStatus::Ok => {}
        RenderStatus::EmptyOutput => return Validation::fail("empty image"),
        status => {
            let mut reason = format!("render failed: {status:?}");
            if !outcome.stderr_log.is_empty() {
                let snippet: String = outcome.stderr_log.chars().take(400).collect();
                reason = format!("{reason}: {snippet}");
            }
            return Validation::fail(reason);
        }
    }
    let bytes = match &outcome.image_bytes {
        Some(b) if !b.is_empty() => b,
        _ => return Validation::fail("empty image"),
    };
    if (bytes.len() as u64) < policy.min_output_bytes {
        return Validation::fail(format!(
            "image is {} bytes, below the {}-byte minimum",
            bytes.len(),
            policy.min_output_bytes
        ));
    }
    if bytes.len() as u64 > policy.max_output_bytes {
        return Validation::fail(format!(
            "image is {} bytes, above the {}-byte cap",
            bytes.len(),
            policy.max_output_bytes
        ));
    }
    if bytes.starts_with(PNG_MAGIC) {
        return Validation::pass();
    }
    let text = String::from_utf8_lossy(bytes);
    if text.trim_start().starts_with('<') {
        return match svg::check_well_formed(&text) {
            Ok(()) => Validation::pass(),
            Err(reason) => Validation::fail(format!("malformed SVG: {reason}")),
        };
    }
    Validation::fail("unsupported image container")
}

/// Supplies fixed-up programs given failing code and its error log. The
/// agentic loop backs this with the code-editor model; tests script it.
pub trait CodeFixer {
    fn fix(&mut self, spec: &RenderSpec, failure: &str) -> Result<RenderSpec, RenderError>;
}

impl<F> CodeFixer for F
where
    F: FnMut(&RenderSpec, &str) -> Result<RenderSpec, RenderError>,
{
    fn fix(&mut self, spec: &RenderSpec, failure: &str) -> Result<RenderSpec, RenderError> {
        self(spec, failure)
    }
}

/// Outcome of the render/repair loop.
#[derive(Debug)]
pub enum RepairOutcome {
    Success {
        spec: RenderSpec,
        image_bytes: Vec<u8>,
        stderr_log: String,
        editor_calls: u32,
    },
    /// Repair budget exhausted; the episode continues on the previous image.
    Backoff {
        editor_calls: u32,
        last_failure: String,
    },
}

/// Renders, validates, and on failure asks the fixer for a replacement
/// program, up to `max_repairs` times. At most `max_repairs` editor calls
/// and `max_repairs + 1` renders.
pub fn repair_loop(
    spec: &RenderSpec,
    fixer: &mut dyn CodeFixer,
    max_repairs: u32,
    policy: &SandboxPolicy,
) -> Result<RepairOutcome, RenderError> {
    let mut current = spec.clone();
    let mut editor_calls = 0u32;
    loop {
        let outcome = render(&current, policy)?;
        let validation = validate(&outcome, policy);
        if validation.pass {
            return Ok(RepairOutcome::Success {
                spec: current,
                image_bytes: outcome.image_bytes.expect("validated image"),
                stderr_log: outcome.stderr_log,
                editor_calls,
            });
        }
        let mut failure = validation.reason.unwrap_or_else(|| "render failed".into());
        if !outcome.stderr_log.is_empty() && !failure.contains(&outcome.stderr_log) {
            failure = format!("{failure}\nstderr:\n{}", outcome.stderr_log);
        }
        if editor_calls >= max_repairs {
            return Ok(RepairOutcome::Backoff {
                editor_calls,
                last_failure: failure,
            });
        }
        current = fixer.fix(&current, &failure)?;
        editor_calls += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shell_policy(timeout_ms: u64) -> SandboxPolicy {
        let mut policy = SandboxPolicy::default();
        policy.profiles.insert(
            "shell".into(),
            RendererProfile {
                command: "sh {code} {output}".into(),
                timeout_ms,
                preamble: None,
            },
        );
        policy
    }

    fn spec(source: &str) -> RenderSpec {
        RenderSpec {
            language_tag: "sh".into(),
            source_text: source.into(),
            renderer_profile: "shell".into(),
        }
    }

    const WRITE_PNG: &str = r#"printf '\211PNG\r\n\032\nstable-pixel' > "$1""#;

    #[test]
    fn ok_render_is_deterministic() {
        let policy = shell_policy(5000);
        let a = render(&spec(WRITE_PNG), &policy).unwrap();
        let b = render(&spec(WRITE_PNG), &policy).unwrap();
        assert_eq!(a.status, RenderStatus::Ok);
        assert_eq!(a.image_bytes, b.image_bytes);
        assert!(validate(&a, &policy).pass);
    }

    #[test]
    fn syntax_error_is_classified_with_stderr() {
        let policy = shell_policy(5000);
        let out = render(&spec("if then ("), &policy).unwrap();
        assert_eq!(out.status, RenderStatus::SyntaxError);
        assert!(!out.stderr_log.is_empty());
        let v = validate(&out, &policy);
        assert!(!v.pass);
        assert!(v.reason.unwrap().contains("render failed"));
    }

    #[test]
    fn runtime_error_is_classified() {
        let policy = shell_policy(5000);
        let out = render(&spec("exit 3"), &policy).unwrap();
        assert_eq!(out.status, RenderStatus::RuntimeError);
    }

    #[test]
    fn timeout_kills_and_reports() {
        let policy = shell_policy(500);
        let start = Instant::now();
        let out = render(&spec("sleep 30"), &policy).unwrap();
        assert_eq!(out.status, RenderStatus::Timeout);
        assert!(out.wall_time >= Duration::from_millis(500));
        assert!(start.elapsed() < Duration::from_millis(500) + GRACE + Duration::from_secs(1));
    }

    #[test]
    fn empty_output_detected() {
        let policy = shell_policy(5000);
        let out = render(&spec("true"), &policy).unwrap();
        assert_eq!(out.status, RenderStatus::EmptyOutput);
        assert!(!validate(&out, &policy).pass);
    }

    #[test]
    fn missing_profile_is_an_error() {
        let policy = shell_policy(5000);
        let mut s = spec(WRITE_PNG);
        s.renderer_profile = "nope".into();
        assert!(matches!(
            render(&s, &policy),
            Err(RenderError::ProfileNotFound(_))
        ));
    }

    #[test]
    fn policy_rejects_bad_templates() {
        let mut policy = shell_policy(5000);
        policy.profiles.get_mut("shell").unwrap().command = "sh {code}".into();
        assert!(matches!(
            render(&spec(WRITE_PNG), &policy),
            Err(RenderError::Policy(_))
        ));
    }

    #[test]
    fn validate_accepts_svg_and_rejects_garbage() {
        let policy = shell_policy(5000);
        let svg_out = RenderOutcome {
            status: RenderStatus::Ok,
            image_bytes: Some(b"<svg xmlns=\"x\"><rect width=\"3\"/></svg>".to_vec()),
            stderr_log: String::new(),
            wall_time: Duration::ZERO,
        };
        assert!(validate(&svg_out, &policy).pass);

        let garbage = RenderOutcome {
            image_bytes: Some(b"not an image at all".to_vec()),
            ..svg_out.clone()
        };
        assert!(!validate(&garbage, &policy).pass);

        let truncated_svg = RenderOutcome {
            image_bytes: Some(b"<svg><rect>".to_vec()),
            ..svg_out
        };
        assert!(!validate(&truncated_svg, &policy).pass);
    }

    #[test]
    fn preamble_is_prepended() {
        let mut policy = shell_policy(5000);
        policy.profiles.get_mut("shell").unwrap().preamble = Some("SEED=7".into());
        let out = render(
            &spec(r#"printf '\211PNG\r\n\032\nseed-%s' "$SEED" > "$1""#),
            &policy,
        )
        .unwrap();
        assert_eq!(out.status, RenderStatus::Ok);
        let bytes = out.image_bytes.unwrap();
        assert!(bytes.ends_with(b"seed-7"));
    }

    #[test]
    fn scratch_root_resolution_order() {
        let configured = Some(PathBuf::from("/cfg/root"));
        assert_eq!(
            resolve_scratch_root(Some("/env/root".into()), &configured),
            PathBuf::from("/env/root")
        );
        assert_eq!(
            resolve_scratch_root(None, &configured),
            PathBuf::from("/cfg/root")
        );
        assert_eq!(resolve_scratch_root(None, &None), std::env::temp_dir());
        assert_eq!(
            resolve_scratch_root(Some(String::new()), &configured),
            PathBuf::from("/cfg/root")
        );
    }

    #[test]
    fn configured_temp_root_is_used_for_scratch_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let scratch_root = dir.path().join("render-scratch");
        let mut policy = shell_policy(5000);
        policy.temp_root = Some(scratch_root.clone());
        let out = render(&spec(WRITE_PNG), &policy).unwrap();
        assert_eq!(out.status, RenderStatus::Ok);
        // The root was created; per-render scratch dirs are cleaned up.
        assert!(scratch_root.exists());
        assert_eq!(std::fs::read_dir(&scratch_root).unwrap().count(), 0);
    }

    #[test]
    fn repair_loop_zero_calls_on_first_pass() {
        let policy = shell_policy(5000);
        let mut fixer = |_: &RenderSpec, _: &str| -> Result<RenderSpec, RenderError> {
            panic!("fixer must not be called")
        };
        match repair_loop(&spec(WRITE_PNG), &mut fixer, 3, &policy).unwrap() {
            RepairOutcome::Success { editor_calls, .. } => assert_eq!(editor_calls, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repair_loop_succeeds_on_second_fix() {
        let policy = shell_policy(5000);
        let mut calls = 0u32;
        let mut fixer = move |s: &RenderSpec, failure: &str| -> Result<RenderSpec, RenderError> {
            calls += 1;
            assert!(!failure.is_empty());
            let mut next = s.clone();
            next.source_text = if calls < 2 {
                "exit 1".into()
            } else {
                WRITE_PNG.into()
            };
            Ok(next)
        };
        match repair_loop(&spec("exit 1"), &mut fixer, 3, &policy).unwrap() {
            RepairOutcome::Success {
                editor_calls,
                image_bytes,
                ..
            } => {
                assert_eq!(editor_calls, 2);
                assert!(image_bytes.starts_with(PNG_MAGIC));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repair_loop_backs_off_after_exact_budget() {
        let policy = shell_policy(5000);
        let mut calls = 0u32;
        let mut fixer = |s: &RenderSpec, _: &str| -> Result<RenderSpec, RenderError> {
            calls += 1;
            Ok(s.clone())
        };
        match repair_loop(&spec("exit 1"), &mut fixer, 3, &policy).unwrap() {
            RepairOutcome::Backoff {
                editor_calls,
                last_failure,
            } => {
                assert_eq!(editor_calls, 3);
                assert!(last_failure.contains("render failed"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls, 3);
    }

    #[test]
    fn repair_loop_with_zero_budget_backs_off_without_editor() {
        let policy = shell_policy(5000);
        let mut fixer = |_: &RenderSpec, _: &str| -> Result<RenderSpec, RenderError> {
            panic!("no budget, no calls")
        };
        match repair_loop(&spec("exit 1"), &mut fixer, 0, &policy).unwrap() {
            RepairOutcome::Backoff { editor_calls, .. } => assert_eq!(editor_calls, 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
