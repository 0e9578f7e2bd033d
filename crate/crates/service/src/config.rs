use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use seeker_core::corpus::{CorpusIndex, DomainAllowlist};
use seeker_core::modelio::{GenerationBackend, HttpBackend, HttpBackendConfig, SingleFlight};
use seeker_core::pipeline::{
    CopyOracleBackend, LocalIndexProvider, Pipeline, PipelineConfig, RemoteSearchConfig,
    RemoteSearchProvider, SearchProvider, StaticProvider,
};

use crate::{router, AppState, DEFAULT_CONFIG};

/// Backend endpoint value that selects the built-in copy oracle.
pub const COPY_ORACLE: &str = "copy-oracle";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub backend: HttpBackendConfig,
    pub search_url: Option<String>,
    pub index_path: Option<PathBuf>,
    pub allowlist_path: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("seeker-data"),
            static_dir: None,
            backend: HttpBackendConfig {
                endpoint: COPY_ORACLE.into(),
                ..Default::default()
            },
            search_url: None,
            index_path: None,
            allowlist_path: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `SEEKER_LISTEN`, `SEEKER_DATA_DIR`, `SEEKER_STATIC_DIR`,
    /// `SEEKER_BACKEND_URL`, `SEEKER_SEARCH_URL`, `SEEKER_INDEX` and
    /// `SEEKER_ALLOWLIST`, falling back to the defaults.
    pub fn from_env() -> Result<Self, String> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut cfg = Self::default();
        if let Some(v) = var("SEEKER_LISTEN") {
            cfg.listen = v.parse().map_err(|e| format!("SEEKER_LISTEN `{v}`: {e}"))?;
        }
        if let Some(v) = var("SEEKER_DATA_DIR") {
            cfg.data_dir = v.into();
        }
        cfg.static_dir = var("SEEKER_STATIC_DIR").map(Into::into);
        if let Some(v) = var("SEEKER_BACKEND_URL") {
            cfg.backend.endpoint = v;
        }
        cfg.search_url = var("SEEKER_SEARCH_URL");
        cfg.index_path = var("SEEKER_INDEX").map(Into::into);
        cfg.allowlist_path = var("SEEKER_ALLOWLIST").map(Into::into);
        Ok(cfg)
    }
}

/// HTTP backend, or the copy oracle when the endpoint is [`COPY_ORACLE`].
pub fn build_backend(config: &HttpBackendConfig, pipeline: &PipelineConfig) -> Arc<dyn GenerationBackend> {
    if config.endpoint == COPY_ORACLE {
        return Arc::new(CopyOracleBackend::new(pipeline.tokens.clone()));
    }
    let http = HttpBackend::new(config.clone());
    if config.single_flight {
        Arc::new(SingleFlight::new(http))
    } else {
        Arc::new(http)
    }
}

/// Remote search when a URL is given, else a local index, else nothing.
pub fn build_provider(cfg: &ServiceConfig) -> io::Result<Arc<dyn SearchProvider>> {
    if let Some(url) = &cfg.search_url {
        return Ok(Arc::new(RemoteSearchProvider::new(RemoteSearchConfig {
            endpoint: url.clone(),
            ..Default::default()
        })));
    }
    if let Some(path) = &cfg.index_path {
        let index = CorpusIndex::load(path).map_err(|e| io::Error::other(e.to_string()))?;
        return Ok(Arc::new(LocalIndexProvider::new(Arc::new(index))));
    }
    Ok(Arc::new(StaticProvider::default()))
}

/// The `default` pipeline described by `cfg` on top of `base`.
pub fn build_pipelines(cfg: &ServiceConfig, mut base: PipelineConfig) -> io::Result<BTreeMap<String, Pipeline>> {
    if let Some(path) = &cfg.allowlist_path {
        base.allowlist = Some(DomainAllowlist::load(path).map_err(|e| io::Error::other(e.to_string()))?);
    }
    let backend = build_backend(&cfg.backend, &base);
    let provider = build_provider(cfg)?;
    let pipeline = Pipeline::new(backend, provider, base).map_err(|e| io::Error::other(e.to_string()))?;
    Ok(BTreeMap::from([(DEFAULT_CONFIG.to_string(), pipeline)]))
}

/// Binds, serves until Ctrl-C, then returns.
pub async fn serve(cfg: ServiceConfig, pipelines: BTreeMap<String, Pipeline>) -> io::Result<()> {
    let app = AppState::open(&cfg.data_dir, pipelines)?;
    tracing::info!(sessions = app.session_count(), data_dir = %cfg.data_dir.display(), "sessions restored");
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app, cfg.static_dir.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
