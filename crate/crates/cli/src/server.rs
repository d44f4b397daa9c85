use std::net::SocketAddr;
use std::sync::Arc;

use adaptloop::api::router;
use adaptloop::platform::{Platform, PlatformConfig};
use anyhow::Context;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

/// A platform served over HTTP from inside the current runtime.
pub struct LocalServer {
    pub platform: Arc<Platform>,
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl LocalServer {
    /// Binds `listen` (use port 0 for an ephemeral port) and starts serving.
    pub async fn start(config: PlatformConfig, listen: &str) -> anyhow::Result<Self> {
        let listener = bind(listen).await?;
        let addr = listener.local_addr()?;
        let platform = Platform::open(config, Some(tokio::runtime::Handle::current()))?;
        let (stop, stopped) = oneshot::channel::<()>();
        let app = router(platform.clone());
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        });
        Ok(Self {
            platform,
            addr,
            stop: Some(stop),
            task,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) -> anyhow::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        // open SSE responses never end on their own
        let abort = self.task.abort_handle();
        match tokio::time::timeout(std::time::Duration::from_secs(2), &mut self.task).await {
            Ok(res) => res??,
            Err(_) => abort.abort(),
        }
        self.platform.shutdown();
        Ok(())
    }
}

pub async fn bind(listen: &str) -> anyhow::Result<TcpListener> {
    TcpListener::bind(listen)
        .await
        .with_context(|| format!("cannot listen on {listen}"))
}

/// Runs the server until ctrl-c.
pub async fn serve(config: PlatformConfig) -> anyhow::Result<()> {
    let listener = bind(&config.listen).await?;
    let platform = Platform::open(config, Some(tokio::runtime::Handle::current()))?;
    tracing::info!(addr = %listener.local_addr()?, data_dir = ?platform.data_dir, "serving");
    let app = router(platform.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    platform.shutdown();
    Ok(())
}
