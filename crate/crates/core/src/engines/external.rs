use std::io::Read;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Substitute `image_path` for every `{image}` in the template, run it through
/// `sh -c`, and return trimmed standard output.
pub fn external_recognize_subprocess(
    backend_id: &str,
    command_template: &str,
    image_path: &std::path::Path,
    timeout: Duration,
) -> Result<String> {
    let fail = |cause: String| Error::Backend {
        backend_id: backend_id.to_string(),
        cause,
    };
    let quoted = shell_quote(&image_path.to_string_lossy());
    let command = command_template.replace("{image}", &quoted);
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| fail(format!("spawn failed: {e}")))?;

    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let start = Instant::now();
    let status = loop {
        match child.try_wait().map_err(|e| fail(format!("wait failed: {e}")))? {
            Some(status) => break status,
            None if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail(format!("timed out after {:?}", timeout)));
            }
            None => std::thread::sleep(Duration::from_millis(5)),
        }
    };
    let out = out_reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(fail(format!(
            "command exited with {status}: {}",
            String::from_utf8_lossy(&err).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out).trim().to_string())
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

/// Extract the `text` field of an HTTP adapter response document.
pub fn parse_http_response(body: &[u8]) -> Result<String> {
    let doc: TextResponse = serde_json::from_slice(body).map_err(|e| Error::parse("ocr http response", e))?;
    Ok(doc.text)
}

/// POST raw PNG bytes to `endpoint` and read the `text` field of the JSON reply.
pub fn external_recognize_http(backend_id: &str, endpoint: &str, png: &[u8], timeout: Duration) -> Result<String> {
    let fail = |cause: String| Error::Backend {
        backend_id: backend_id.to_string(),
        cause,
    };
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let response = agent
        .post(endpoint)
        .set("Content-Type", "image/png")
        .send_bytes(png)
        .map_err(|e| match e {
            ureq::Error::Status(code, _) => fail(format!("status {code}")),
            ureq::Error::Transport(t) => fail(format!("transport: {t}")),
        })?;
    let mut body = Vec::new();
    response
        .into_reader()
        .take(16 << 20)
        .read_to_end(&mut body)
        .map_err(|e| fail(format!("reading body: {e}")))?;
    parse_http_response(&body).map_err(|e| fail(e.to_string()))
}
