use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use memeshield_core::correction::CorrectionStatus;
use memeshield_core::pipeline::read_corrections;
use memeshield_review::api::{serve, CreateBatchRequest};
use memeshield_review::{router, AppState, AuthConfig, ReviewStore};
use serde_json::Value;

pub const TOKEN_ENV: &str = "MEMESHIELD_REVIEW_TOKEN";

#[derive(Subcommand)]
pub enum ReviewCommand {
    /// Serve the review API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
        /// State directory holding the event log and snapshots.
        #[arg(long)]
        state: PathBuf,
        /// TOML file with coordinator and expert tokens.
        #[arg(long)]
        auth: PathBuf,
        /// Dataset root that item image paths are relative to.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Static UI bundle served under /ui.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Open a review batch from a corrections.jsonl file.
    Create {
        /// Base URL of a running review service.
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        /// Coordinator token; falls back to MEMESHIELD_REVIEW_TOKEN.
        #[arg(long)]
        token: Option<String>,
        #[arg(long)]
        corrections: PathBuf,
        /// Comma-separated expert ids.
        #[arg(long, value_delimiter = ',', required = true)]
        panel: Vec<String>,
        #[arg(long)]
        quorum: usize,
        /// Only include candidates that passed automatic verification.
        #[arg(long)]
        verified_only: bool,
    },
    /// Print a batch summary.
    Summary {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        #[arg(long)]
        token: Option<String>,
        #[arg(long)]
        batch: String,
    },
}

fn token(explicit: Option<String>) -> Result<String> {
    explicit
        .or_else(|| std::env::var(TOKEN_ENV).ok())
        .context("pass --token or set MEMESHIELD_REVIEW_TOKEN")
}

fn send(req: reqwest::blocking::RequestBuilder) -> Result<(reqwest::StatusCode, Value)> {
    let resp = req.send().context("review service unreachable")?;
    let status = resp.status();
    let body = resp.json().unwrap_or(Value::Null);
    Ok((status, body))
}

pub fn run(command: ReviewCommand) -> Result<ExitCode> {
    match command {
        ReviewCommand::Serve { port, bind, state, auth, data, ui } => {
            let auth = AuthConfig::from_toml_file(&auth)?;
            if auth.coordinator_token.is_empty() {
                bail!("coordinator_token must not be empty");
            }
            let store = ReviewStore::open(&state)?;
            let app = router(
                AppState { store: Arc::new(store), auth: Arc::new(auth), data_root: data },
                ui.as_deref(),
            );
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(SocketAddr::new(bind, port)).await?;
                println!("review service listening on http://{}", listener.local_addr()?);
                serve(listener, app).await
            })?;
            Ok(ExitCode::SUCCESS)
        }
        ReviewCommand::Create { server, token: t, corrections, panel, quorum, verified_only } => {
            let mut candidates = read_corrections(&corrections)?;
            if verified_only {
                candidates.retain(|c| c.status == CorrectionStatus::VerifiedNonhateful);
            }
            let body = CreateBatchRequest { candidates, panel, quorum };
            let url = format!("{}/batches", server.trim_end_matches('/'));
            let client = reqwest::blocking::Client::new();
            let (status, resp) = send(client.post(url).bearer_auth(token(t)?).json(&body))?;
            if !status.is_success() {
                bail!("batch creation failed ({status}): {}", resp["error"]);
            }
            println!("created batch {} with {} items", resp["batch_id"].as_str().unwrap_or("?"), resp["items"]);
            Ok(ExitCode::SUCCESS)
        }
        ReviewCommand::Summary { server, token: t, batch } => {
            let url = format!("{}/batches/{batch}/summary", server.trim_end_matches('/'));
            let (status, resp) = send(reqwest::blocking::Client::new().get(url).bearer_auth(token(t)?))?;
            println!("{}", serde_json::to_string_pretty(&resp)?);
            Ok(match status.as_u16() {
                200 => ExitCode::SUCCESS,
                409 => ExitCode::from(1),
                _ => bail!("summary request failed ({status})"),
            })
        }
    }
}
