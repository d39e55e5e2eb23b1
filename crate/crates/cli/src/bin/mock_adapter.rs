//! Minimal classifier adapter for exercising the wire protocol.
//!
//! Answers every classify request with fixed probabilities, or with
//! `[mean, 1 - mean]` of the image's pixels under `--mean-pixel`. The
//! probabilities are sent as given, so invalid vectors can be served on purpose.

use std::io::{self, BufRead, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use clap::Parser;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "pda-mock-adapter", about = "Test adapter speaking the classifier wire protocol")]
struct Args {
    /// Comma-separated class probabilities returned for every image.
    #[arg(long, default_value = "0.2,0.8", value_delimiter = ',')]
    probs: Vec<f64>,

    /// Classes to advertise; defaults to the length of --probs.
    #[arg(long)]
    classes: Option<usize>,

    /// Advertised input size as W,H,C.
    #[arg(long, default_value = "4,4,1", value_delimiter = ',')]
    dims: Vec<usize>,

    /// Protocol version to advertise.
    #[arg(long, default_value_t = 1)]
    version: u32,

    /// Reply [mean, 1 - mean] of each image instead of --probs.
    #[arg(long)]
    mean_pixel: bool,

    /// Exit status after a shutdown request.
    #[arg(long, default_value_t = 0)]
    exit_code: i32,
}

fn decode(text: &str, expected: usize) -> Result<Vec<f32>, String> {
    let bytes = BASE64.decode(text).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() != 4 * expected {
        return Err(format!("expected {expected} floats, got {} bytes", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn handle(args: &Args, msg: &Value) -> Result<Value, (Option<u64>, String)> {
    let id = msg.get("id").and_then(Value::as_u64);
    let n_pixels = args.dims.iter().product();
    let images = msg
        .get("images")
        .and_then(Value::as_array)
        .ok_or((id, "missing images".to_string()))?;
    let mut probs = Vec::with_capacity(images.len());
    for img in images {
        let text = img.as_str().ok_or((id, "image is not a string".to_string()))?;
        let pixels = decode(text, n_pixels).map_err(|e| (id, e))?;
        if args.mean_pixel {
            let mean = pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / pixels.len() as f64;
            probs.push(vec![mean, 1.0 - mean]);
        } else {
            probs.push(args.probs.clone());
        }
    }
    Ok(json!({"type": "result", "id": id, "probs": probs}))
}

fn main() {
    let args = Args::parse();
    if args.dims.len() != 3 {
        eprintln!("--dims needs W,H,C");
        std::process::exit(2);
    }
    let k = args.classes.unwrap_or(args.probs.len());
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Err(e) => json!({"type": "error", "message": format!("bad json: {e}")}),
            Ok(msg) => match msg.get("type").and_then(Value::as_str) {
                Some("hello") => json!({
                    "type": "hello",
                    "version": args.version,
                    "classes": (0..k).map(|i| format!("class{i}")).collect::<Vec<_>>(),
                    "width": args.dims[0],
                    "height": args.dims[1],
                    "channels": args.dims[2],
                    "concurrent": false,
                }),
                Some("classify") => handle(&args, &msg)
                    .unwrap_or_else(|(id, message)| json!({"type": "error", "id": id, "message": message})),
                Some("shutdown") => std::process::exit(args.exit_code),
                _ => json!({"type": "error", "id": msg.get("id"), "message": "unknown request"}),
            },
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}
