#![allow(dead_code)]

use aura::data::{generate_synthetic, Dataset, Split, SynthConfig};
use aura::pipeline::{resolve_prior, Mode, PipelineConfig};
use aura::reasoner::TrainConfig;
use aura::scoring::Backend;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

pub fn synth(n: usize, k: usize, rate: f64, seed: u64, split: Split) -> Dataset {
    generate_synthetic(&SynthConfig::new(n, k, rate, seed).split(split))
        .unwrap()
        .dataset
}

/// Clean corpus the builtin prior is pretrained on, disjoint from the splits.
pub fn prior_corpus(n: usize, k: usize, seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig::new(n, k, 0.0, seed).stream(3).name("prior"))
        .unwrap()
        .dataset
}

pub fn pretrained_prior(k: usize, seed: u64) -> Backend {
    let cfg = PipelineConfig::new(Mode::Aura, seed);
    resolve_prior(&cfg, Some(&prior_corpus(2000, k, seed)), &TrainConfig::default()).unwrap()
}

pub enum Reply {
    Status(u16, String),
    /// Drop the connection without answering.
    Close,
    /// Hold the connection open without answering.
    Hang(Duration),
}

/// A minimal HTTP/1.1 server on a loopback port. `handler` sees the 0-based
/// request count and the request body.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(handler: impl Fn(usize, &str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        let handler = Arc::new(handler);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let counter = counter.clone();
                let handler = handler.clone();
                thread::spawn(move || serve(stream, &counter, &*handler));
            }
        });
        MockServer { url, requests }
    }

    pub fn count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, counter: &AtomicUsize, handler: &dyn Fn(usize, &str) -> Reply) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut stream = stream;
    loop {
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let l = line.trim_end();
            if l.is_empty() {
                break;
            }
            if let Some((k, v)) = l.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; content_length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let n = counter.fetch_add(1, Ordering::SeqCst);
        match handler(n, &String::from_utf8_lossy(&body)) {
            Reply::Status(code, text) => {
                let resp = format!(
                    "HTTP/1.1 {code} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{text}",
                    text.len()
                );
                if stream.write_all(resp.as_bytes()).is_err() {
                    return;
                }
            }
            Reply::Close => return,
            Reply::Hang(d) => {
                thread::sleep(d);
                return;
            }
        }
    }
}
