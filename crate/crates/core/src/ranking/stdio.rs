use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{ExistenceOracle, Logits, OracleError};
use crate::geometry::PixelRect;

/// One request line written to the oracle process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub rect: PixelRect,
    pub target: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteError {
    pub code: String,
    #[serde(default)]
    pub message: String,
}

/// One response line: either logits or an error object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OracleResponse {
    Logits { l_yes: f64, l_no: f64 },
    Error { error: RemoteError },
}

/// Existence oracle backed by a child process speaking line-delimited JSON
/// over stdin/stdout. Anything the process writes to stderr is kept and
/// attached to errors.
pub struct StdioOracle {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    stderr: Arc<Mutex<String>>,
    drain: Option<JoinHandle<()>>,
    image_ref: String,
}

impl StdioOracle {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str, image_ref: impl Into<String>) -> Result<Self, OracleError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| OracleError::Process {
                message: format!("cannot start `{command}`: {e}"),
                stderr: String::new(),
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        let drain = std::thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = err_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                sink.lock()
                    .expect("stderr buffer")
                    .push_str(&String::from_utf8_lossy(&buf[..n]));
            }
        });
        Ok(Self {
            child,
            stdin,
            stdout,
            stderr,
            drain: Some(drain),
            image_ref: image_ref.into(),
        })
    }

    /// Points subsequent requests at another image.
    pub fn set_image_ref(&mut self, image_ref: impl Into<String>) {
        self.image_ref = image_ref.into();
    }

    fn failure(&mut self, message: String) -> OracleError {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(h) = self.drain.take() {
            let _ = h.join();
        }
        OracleError::Process {
            message,
            stderr: self.stderr.lock().map(|s| s.clone()).unwrap_or_default(),
        }
    }
}

impl ExistenceOracle for StdioOracle {
    fn query(&mut self, rect: &PixelRect, target: &str) -> Result<Logits, OracleError> {
        let request = OracleRequest {
            rect: *rect,
            target: target.to_string(),
            image_ref: self.image_ref.clone(),
        };
        let mut line = serde_json::to_string(&request).expect("request serializes");
        line.push('\n');
        let Some(stdin) = self.stdin.as_mut() else {
            return Err(self.failure("oracle process already closed".into()));
        };
        if let Err(e) = stdin
            .write_all(line.as_bytes())
            .and_then(|()| stdin.flush())
        {
            return Err(self.failure(format!("write failed: {e}")));
        }
        let mut reply = String::new();
        match self.stdout.read_line(&mut reply) {
            Ok(0) => return Err(self.failure("oracle exited without replying".into())),
            Err(e) => return Err(self.failure(format!("read failed: {e}"))),
            Ok(_) => {}
        }
        match serde_json::from_str::<OracleResponse>(reply.trim_end()) {
            Ok(OracleResponse::Logits { l_yes, l_no }) if l_yes.is_finite() && l_no.is_finite() => {
                Ok(Logits { l_yes, l_no })
            }
            Ok(OracleResponse::Logits { .. }) => {
                Err(OracleError::Protocol("non-finite logits".into()))
            }
            Ok(OracleResponse::Error { error }) => Err(OracleError::Remote {
                code: error.code,
                message: error.message,
            }),
            Err(e) => Err(OracleError::Protocol(format!(
                "bad response `{}`: {e}",
                reply.trim_end()
            ))),
        }
    }
}

impl Drop for StdioOracle {
    fn drop(&mut self) {
        // closing stdin is the shutdown signal
        self.stdin = None;
        let _ = self.child.wait();
        if let Some(h) = self.drain.take() {
            let _ = h.join();
        }
    }
}
