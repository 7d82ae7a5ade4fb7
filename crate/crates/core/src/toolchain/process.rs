//! Subprocess execution with a wall-clock limit.

use std::io::{Read, Write};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::Duration;

use wait_timeout::ChildExt;

#[derive(Debug, Clone)]
pub struct ProcessOutput {
    /// `None` when the process was killed for exceeding the limit.
    pub status: Option<ExitStatus>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl ProcessOutput {
    pub fn timed_out(&self) -> bool {
        self.status.is_none()
    }

    pub fn success(&self) -> bool {
        self.status.is_some_and(|s| s.success())
    }

    pub fn stderr_lossy(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }

    /// Describes how the process ended: `exit 3`, `signal 11`, or `timeout`.
    pub fn exit_description(&self) -> String {
        match self.status {
            None => "timeout".into(),
            Some(s) => match s.code() {
                Some(code) => format!("exit {code}"),
                None => signal_description(s),
            },
        }
    }
}

#[cfg(unix)]
fn signal_description(s: ExitStatus) -> String {
    use std::os::unix::process::ExitStatusExt;
    match s.signal() {
        Some(sig) => format!("signal {sig}"),
        None => "terminated".into(),
    }
}

#[cfg(not(unix))]
fn signal_description(_: ExitStatus) -> String {
    "terminated".into()
}

/// Runs `cmd`, feeding `stdin` and capturing both output streams, and kills it
/// once `timeout` elapses.
pub fn run_with_timeout(
    mut cmd: Command,
    stdin: Option<&[u8]>,
    timeout: Duration,
) -> std::io::Result<ProcessOutput> {
    cmd.stdin(if stdin.is_some() {
        Stdio::piped()
    } else {
        Stdio::null()
    })
    .stdout(Stdio::piped())
    .stderr(Stdio::piped());
    let mut child = cmd.spawn()?;

    let feeder = match (stdin, child.stdin.take()) {
        (Some(bytes), Some(mut pipe)) => {
            let bytes = bytes.to_vec();
            Some(thread::spawn(move || {
                // A child that exits early closes the pipe; that is not our error.
                let _ = pipe.write_all(&bytes);
            }))
        }
        _ => None,
    };
    let mut out_pipe = child.stdout.take().expect("stdout piped");
    let mut err_pipe = child.stderr.take().expect("stderr piped");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let status = match child.wait_timeout(timeout)? {
        Some(status) => Some(status),
        None => {
            let _ = child.kill();
            child.wait()?;
            None
        }
    };
    if let Some(f) = feeder {
        let _ = f.join();
    }
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    Ok(ProcessOutput {
        status,
        stdout,
        stderr,
    })
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    #[test]
    fn captures_output_and_stdin() {
        let out = run_with_timeout(Command::new("cat"), Some(b"hello"), Duration::from_secs(5)).unwrap();
        assert!(out.success());
        assert_eq!(out.stdout, b"hello");
    }

    #[test]
    fn kills_on_timeout() {
        let mut cmd = Command::new("sleep");
        cmd.arg("5");
        let start = std::time::Instant::now();
        let out = run_with_timeout(cmd, None, Duration::from_millis(100)).unwrap();
        assert!(out.timed_out());
        assert_eq!(out.exit_description(), "timeout");
        assert!(start.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn reports_exit_codes() {
        let mut cmd = Command::new("sh");
        cmd.args(["-c", "echo oops >&2; exit 3"]);
        let out = run_with_timeout(cmd, None, Duration::from_secs(5)).unwrap();
        assert_eq!(out.exit_description(), "exit 3");
        assert_eq!(out.stderr_lossy().trim(), "oops");
    }
}
