//! Starts the REST server for a checkpoint and drives one session over
//! plain HTTP: create, three user turns, transcript, delete.
//!
//! Usage: `cargo run --release --example serve_client -- CHECKPOINT [DATA_DIR] [ADDR]`
//! The session's profile, knowledge and target come from the first dev
//! sample. ADDR defaults to 127.0.0.1:8089.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use tgdial::checkpoint::load_checkpoint;
use tgdial::corpus::load_dataset;
use tgdial::generator::DecodeSettings;
use tgdial::serve::{serve, AppState, DEFAULT_IDLE_TIMEOUT};

async fn request(
    addr: SocketAddr,
    method: &str,
    path: &str,
    body: Option<&Value>,
) -> std::io::Result<(u16, Value)> {
    let mut stream = TcpStream::connect(addr).await?;
    let payload = body.map(Value::to_string).unwrap_or_default();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        payload.len()
    );
    stream.write_all(head.as_bytes()).await?;
    stream.write_all(payload.as_bytes()).await?;
    let mut raw = String::new();
    stream.read_to_string(&mut raw).await?;
    let (head, body) = raw.split_once("\r\n\r\n").unwrap_or((&raw, ""));
    let status = head
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    Ok((status, serde_json::from_str(body).unwrap_or(Value::Null)))
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = load_checkpoint(&PathBuf::from(
        args.first()
            .ok_or("usage: serve_client CHECKPOINT [DATA_DIR] [ADDR]")?,
    ))?;
    let data = args.get(1).map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny"),
        PathBuf::from,
    );
    let addr: SocketAddr = args
        .get(2)
        .map_or("127.0.0.1:8089", String::as_str)
        .parse()?;
    let (split, inv) = load_dataset(&data, Some(&ckpt.inventory))?;
    let sample = split.dev.first().ok_or("dev split is empty")?;

    let settings = DecodeSettings {
        max_len: ckpt.model.config.max_tgt_len,
        m: ckpt.meta.loss.m,
        ..DecodeSettings::default()
    };
    let state = AppState::new(
        ckpt.model,
        ckpt.vocab,
        ckpt.inventory,
        settings,
        DEFAULT_IDLE_TIMEOUT,
    )?;
    tokio::spawn(serve(Arc::new(state), addr));
    for _ in 0..50 {
        if TcpStream::connect(addr).await.is_ok() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }

    let profile: serde_json::Map<String, Value> = sample
        .profile
        .iter()
        .map(|(k, v)| (k.clone(), json!(v)))
        .collect();
    let knowledge: Vec<[&str; 3]> = sample
        .knowledge
        .iter()
        .map(|t| [t.subject.as_str(), t.relation.as_str(), t.object.as_str()])
        .collect();
    let body = json!({
        "profile": profile,
        "knowledge": knowledge,
        "target": {"type": inv.type_name(sample.target.type_id), "topic": inv.topic_name(sample.target.topic_id)},
    });
    let (status, created) = request(addr, "POST", "/session", Some(&body)).await?;
    println!("POST /session -> {status} {created}");
    let id = created["id"].as_str().ok_or("no session id")?.to_string();

    for text in [
        "hi , how are you ?",
        "i am fine , thanks .",
        "what do you suggest ?",
    ] {
        let (status, reply) = request(
            addr,
            "POST",
            &format!("/session/{id}/utterance"),
            Some(&json!({ "text": text })),
        )
        .await?;
        println!(
            "\nuser:   {text}\nsystem: {}  [{status}, achieved {}]",
            reply["reply"], reply["achieved"]
        );
        let bias: Vec<&str> = reply["bias_top"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|e| e["token"].as_str())
            .collect();
        println!("bias:   {}", bias.join(" "));
    }

    let (status, transcript) = request(addr, "GET", &format!("/session/{id}"), None).await?;
    println!(
        "\nGET transcript -> {status}, {} turns",
        transcript["turns"].as_array().map_or(0, Vec::len)
    );
    let (status, _) = request(addr, "DELETE", &format!("/session/{id}"), None).await?;
    println!("DELETE -> {status}");
    Ok(())
}
