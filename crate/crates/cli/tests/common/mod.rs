#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_cloudhealth");

pub fn shipped(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn shipped_inputs() -> Vec<String> {
    vec![
        "--model".into(),
        shipped("models/default.json").display().to_string(),
        "--architecture".into(),
        shipped("arch/microgrid.json").display().to_string(),
        "--catalog".into(),
        shipped("catalog/default.json").display().to_string(),
    ]
}

/// A `cloudhealth serve` child bound to an ephemeral port.
pub struct Service {
    child: Child,
    pub base: String,
    client: reqwest::blocking::Client,
}

impl Service {
    pub fn start(extra: &[&str]) -> Service {
        Self::start_with_env(extra, &[])
    }

    pub fn start_with_env(extra: &[&str], env: &[(&str, &str)]) -> Service {
        let mut args = shipped_inputs();
        args.extend(["--listen".to_string(), "127.0.0.1:0".to_string()]);
        args.extend(extra.iter().map(|s| s.to_string()));
        Self::start_raw(&args, env)
    }

    /// `cloudhealth serve` with exactly `args`.
    pub fn start_raw(args: &[String], env: &[(&str, &str)]) -> Service {
        let mut cmd = Command::new(BIN);
        cmd.arg("serve")
            .args(args)
            .env("RUST_LOG", "warn")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        for (k, v) in env {
            cmd.env(k, v);
        }
        let mut child = cmd.spawn().expect("spawn cloudhealth serve");
        let stdout = child.stdout.take().unwrap();
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected startup line {line:?}"))
            .to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .unwrap();
        Service {
            child,
            base,
            client,
        }
    }

    fn finish(resp: reqwest::blocking::Response) -> (u16, Value) {
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        (status, body)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        Self::finish(self.client.get(format!("{}{path}", self.base)).send().unwrap())
    }

    pub fn get_text(&self, path: &str) -> (u16, String) {
        let resp = self.client.get(format!("{}{path}", self.base)).send().unwrap();
        (resp.status().as_u16(), resp.text().unwrap())
    }

    pub fn put_json(&self, path: &str, body: &Value) -> (u16, Value) {
        Self::finish(
            self.client
                .put(format!("{}{path}", self.base))
                .header("content-type", "application/json")
                .body(body.to_string())
                .send()
                .unwrap(),
        )
    }

    pub fn post_json(&self, path: &str, body: &Value) -> (u16, Value) {
        Self::finish(
            self.client
                .post(format!("{}{path}", self.base))
                .header("content-type", "application/json")
                .body(body.to_string())
                .send()
                .unwrap(),
        )
    }

    pub fn post(&self, path: &str, body: impl Into<String>) -> (u16, Value) {
        Self::finish(
            self.client
                .post(format!("{}{path}", self.base))
                .body(body.into())
                .send()
                .unwrap(),
        )
    }
}

impl Service {
    /// SIGTERM and wait for a clean exit. Returns the exit status code.
    pub fn terminate(&mut self) -> Option<i32> {
        if let Ok(Some(status)) = self.child.try_wait() {
            return status.code();
        }
        let _ = Command::new("kill")
            .args(["-TERM", &self.child.id().to_string()])
            .status();
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while std::time::Instant::now() < deadline {
            if let Ok(Some(status)) = self.child.try_wait() {
                return status.code();
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        None
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        // graceful first so the service stops its probe processes
        if self.terminate().is_none() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Metric leaves under `goal` in a model document, by walking its JSON.
pub fn leaves_under(model: &Value, goal: &str) -> Vec<String> {
    let goals = model["goals"].as_array().unwrap();
    let mut out = Vec::new();
    let mut stack = vec![goal.to_string()];
    while let Some(id) = stack.pop() {
        match goals.iter().find(|g| g["id"] == id.as_str()) {
            Some(g) => {
                for c in g["children"].as_array().unwrap() {
                    stack.push(c.as_str().unwrap().to_string());
                }
            }
            None => out.push(id),
        }
    }
    out.sort();
    out
}
