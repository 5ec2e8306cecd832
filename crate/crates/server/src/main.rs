use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use margin_core::report::render_markdown;
use margin_core::{MaterialId, UserId};
use margin_server::config::AppConfig;
use margin_server::{Forum, NewPost};
use serde::Deserialize;

/// Discussion service and admin tool. Configuration comes from MARGIN_* variables.
#[derive(Parser)]
#[command(name = "margin", version)]
struct Cli {
    /// Overrides MARGIN_STORE.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        /// Overrides MARGIN_LISTEN.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Ingest a plain-text material (paragraphs separated by blank lines).
    Ingest {
        #[arg(long)]
        id: String,
        #[arg(long)]
        title: String,
        file: PathBuf,
    },
    /// Create users and print one bearer token per user.
    Provision { users: Vec<String> },
    /// Load fixture posts from a JSON list of {author, material_id, anchor_paragraph, content}.
    Seed { file: PathBuf },
    /// Print a user's learning report.
    ExportReport {
        #[arg(long)]
        user: String,
        #[arg(long)]
        material: String,
        /// Emit JSON instead of markdown.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct SeedPost {
    author: String,
    #[serde(flatten)]
    post: NewPost,
}

fn run(cli: Cli) -> Result<(), String> {
    let mut config = AppConfig::from_env()?;
    if let Some(store) = cli.store {
        config.store = Some(store);
    }
    let forum = config.build_forum()?;
    let err = |e: margin_server::ServiceError| e.to_string();
    match cli.command {
        Command::Serve { listen } => serve(forum, listen.unwrap_or(config.listen)),
        Command::Ingest { id, title, file } => {
            let text = std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let out = forum.ingest_material(&id, &title, &text).map_err(err)?;
            println!("ingested {id}: {} paragraphs, {} chunks", out.material.len(), out.chunk_count);
            Ok(())
        }
        Command::Provision { users } => {
            for u in users {
                let user = forum.provision_user(&u).map_err(err)?;
                let session = forum.issue_session(&user.id).map_err(err)?;
                println!("{}\t{}", user.id, session.token);
            }
            Ok(())
        }
        Command::Seed { file } => {
            let text = std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let posts: Vec<SeedPost> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", file.display()))?;
            let n = posts.len();
            for p in posts {
                forum.seed_post(&p.author, p.post).map_err(err)?;
            }
            println!("seeded {n} posts");
            Ok(())
        }
        Command::ExportReport { user, material, json, out } => {
            let material = MaterialId::new(material);
            let report = forum.report(&UserId::new(user), &material).map_err(err)?;
            let text = if json {
                serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?
            } else {
                render_markdown(&report, &forum.material(&material).map_err(err)?)
            };
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display())),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn serve(forum: Forum, listen: String) -> Result<(), String> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen).await.map_err(|e| format!("{listen}: {e}"))?;
        eprintln!("listening on {listen}");
        axum::serve(listener, margin_server::http::router(forum))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("margin: {e}");
            ExitCode::FAILURE
        }
    }
}
