use std::path::PathBuf;

pub const ENV_PORT: &str = "DERMANET_PORT";
pub const ENV_BUNDLE: &str = "DERMANET_BUNDLE";

#[derive(Clone, Debug, PartialEq)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub bundle: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            bundle: None,
            static_dir: None,
        }
    }
}

impl ServeConfig {
    /// Fills `port` and `bundle` from the environment. Values already set by
    /// the caller (command-line flags) win.
    pub fn with_env(self, port_flag: Option<u16>, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let port = match (port_flag, lookup(ENV_PORT)) {
            (Some(p), _) => p,
            (None, Some(v)) => v.trim().parse().map_err(|_| format!("{ENV_PORT}={v:?} is not a port number"))?,
            (None, None) => self.port,
        };
        let bundle = self.bundle.or_else(|| lookup(ENV_BUNDLE).map(PathBuf::from));
        Ok(Self { port, bundle, ..self })
    }
}
