use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use percept_core::engine::{Durability, Engine, EngineError, EngineSettings, SystemClock};

use crate::api::{router, AppState};
use crate::config::{ConfigError, ServiceConfig};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Opens the engine described by a service config, replaying its log.
pub fn open_engine(config: &ServiceConfig) -> Result<Engine, ServiceError> {
    config.validate()?;
    let settings = EngineSettings {
        seed: config.session_seed.unwrap_or_else(rand::random),
        ..config.engine.clone()
    };
    let clock = Arc::new(SystemClock);
    Ok(match config.durability {
        Durability::Memory => Engine::in_memory(settings, clock)?,
        d => Engine::open(&config.data_dir, d, settings, clock)?,
    })
}

/// Serves until `shutdown` resolves, expiring idle sessions in the background.
pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    let engine = state.engine.clone();
    let period = Duration::from_secs(state.config.sweep_interval_secs);
    let sweeper = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let e = engine.clone();
            match tokio::task::spawn_blocking(move || e.expire_stale()).await {
                Ok(Ok(n)) if n > 0 => tracing::info!(expired = n, "swept idle sessions"),
                Ok(Err(e)) => tracing::warn!(error = %e, "expiry sweep failed"),
                _ => {}
            }
        }
    });
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    result
}

/// Runs the service in the foreground until interrupted.
pub fn run(config: ServiceConfig) -> Result<(), ServiceError> {
    let engine = Arc::new(open_engine(&config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = TcpListener::bind(config.bind).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        let state = AppState {
            engine,
            config: Arc::new(config),
        };
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}

/// A service running on its own thread and runtime, stopped on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    engine: Arc<Engine>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    /// Starts serving `engine` on `config.bind` (port 0 picks a free port).
    pub fn start(config: ServiceConfig, engine: Arc<Engine>) -> Result<Self, ServiceError> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(TcpListener::bind(config.bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let state = AppState {
            engine: engine.clone(),
            config: Arc::new(config),
        };
        let thread = thread::spawn(move || {
            runtime.block_on(serve(listener, state, async {
                let _ = rx.await;
            }))
        });
        Ok(Self {
            addr,
            engine,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}
