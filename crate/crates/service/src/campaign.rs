use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use percept_core::engine::{Durability, EngineSettings, PartitionSummary};
use percept_sim::{PlatformError, SyntheticPool};

use crate::client::HttpPlatform;
use crate::config::ServiceConfig;
use crate::server::{open_engine, ServerHandle, ServiceError};

/// Admin token of services started by [`launch_local`].
pub const LOCAL_TOKEN: &str = "local-admin";

/// Starts a service on a free loopback port with its log in `data_dir`.
pub fn launch_local(
    data_dir: &Path,
    settings: EngineSettings,
    durability: Durability,
) -> Result<(ServerHandle, HttpPlatform), ServiceError> {
    let config = ServiceConfig {
        bind: SocketAddr::from(([127, 0, 0, 1], 0)),
        data_dir: data_dir.to_path_buf(),
        image_root: data_dir.join("images"),
        durability,
        admin_token: LOCAL_TOKEN.into(),
        session_seed: Some(settings.seed),
        engine: settings,
        ..ServiceConfig::default()
    };
    let engine = Arc::new(open_engine(&config)?);
    let server = ServerHandle::start(config, engine)?;
    let client = HttpPlatform::new(server.base_url(), Some(LOCAL_TOKEN.into()));
    Ok((server, client))
}

/// Writes a synthetic pool under `image_root`, ingests its manifest and
/// partitions the target, all through the admin API.
pub fn stage_pool(
    client: &HttpPlatform,
    world: &SyntheticPool,
    image_root: &Path,
    partition_seed: u64,
) -> Result<PartitionSummary, PlatformError> {
    let manifest = world
        .write_files(image_root)
        .map_err(|e| PlatformError::new("io", e.to_string()))?;
    client.ingest_manifest(manifest, Some(image_root))?;
    client.partition(&world.target, partition_seed)
}
