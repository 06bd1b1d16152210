use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

use parking_lot::Mutex;

use super::{LaunchError, ProbeExecutor};
use crate::catalog::{BindingKey, ProbeBinding, ProbeDescriptor};

/// Spawns each probe as a child process. The child gets its configuration
/// through `PROBE_ID`, `COMPONENT_ID`, `TARGET`, `INTERVAL_SECONDS`,
/// `INGEST_URL` (plus `METRICS`, comma separated) and pushes samples to the
/// ingest endpoint.
pub struct LocalProcessExecutor {
    commands: BTreeMap<String, Vec<String>>,
    ingest_url: String,
    aliases: BTreeMap<String, PathBuf>,
    children: Mutex<BTreeMap<BindingKey, Child>>,
}

impl LocalProcessExecutor {
    pub fn new<'a>(catalog: impl IntoIterator<Item = &'a ProbeDescriptor>, ingest_url: impl Into<String>) -> Self {
        let commands = catalog
            .into_iter()
            .filter_map(|p| p.command.clone().map(|c| (p.id.clone(), c)))
            .filter(|(_, c)| !c.is_empty())
            .collect();
        Self {
            commands,
            ingest_url: ingest_url.into(),
            aliases: BTreeMap::new(),
            children: Mutex::new(BTreeMap::new()),
        }
    }

    /// Resolve a command's program name to a concrete path, e.g. map
    /// `cloudhealth` to the running binary.
    pub fn with_alias(mut self, program: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        self.aliases.insert(program.into(), path.into());
        self
    }

    /// Keys whose process has exited since launch. Exited children are reaped.
    pub fn exited(&self) -> Vec<BindingKey> {
        let mut children = self.children.lock();
        let done: Vec<BindingKey> = children
            .iter_mut()
            .filter_map(|(k, c)| matches!(c.try_wait(), Ok(Some(_))).then_some(k))
            .cloned()
            .collect();
        for k in &done {
            children.remove(k);
        }
        done
    }

    pub fn running(&self) -> usize {
        self.children.lock().len()
    }

    fn kill(child: &mut Child) {
        let _ = child.kill();
        let _ = child.wait();
    }
}

impl ProbeExecutor for LocalProcessExecutor {
    fn launch(&self, binding: &ProbeBinding) -> Result<(), LaunchError> {
        let command = self.commands.get(&binding.probe_id).ok_or_else(|| {
            LaunchError::Failed(format!("probe `{}` has no command", binding.probe_id))
        })?;
        let program = self
            .aliases
            .get(&command[0])
            .cloned()
            .unwrap_or_else(|| PathBuf::from(&command[0]));
        let metrics: Vec<&str> = binding.metrics_served.iter().map(String::as_str).collect();
        let child = Command::new(&program)
            .args(&command[1..])
            .env("PROBE_ID", &binding.probe_id)
            .env("COMPONENT_ID", &binding.component_id)
            .env("TARGET", binding.config.get("target").map_or("", String::as_str))
            .env("INTERVAL_SECONDS", binding.interval_seconds.to_string())
            .env("INGEST_URL", &self.ingest_url)
            .env("METRICS", metrics.join(","))
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| LaunchError::Failed(format!("spawn {}: {e}", program.display())))?;

        if let Some(mut old) = self.children.lock().insert(binding.key(), child) {
            Self::kill(&mut old);
        }
        Ok(())
    }

    fn stop(&self, key: &BindingKey) {
        if let Some(mut child) = self.children.lock().remove(key) {
            Self::kill(&mut child);
        }
    }
}

impl Drop for LocalProcessExecutor {
    fn drop(&mut self) {
        for (_, mut child) in std::mem::take(&mut *self.children.lock()) {
            Self::kill(&mut child);
        }
    }
}
