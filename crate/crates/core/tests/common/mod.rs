#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logged {
    pub path: String,
    pub range: Option<String>,
}

/// Serves `files` at `/<name>` over plain HTTP on localhost, honouring
/// `Range: bytes=k-`. `/fail` answers 500. Every request is logged.
pub struct FixtureServer {
    pub base: String,
    pub log: Arc<Mutex<Vec<Logged>>>,
}

impl FixtureServer {
    pub fn start(files: HashMap<String, Vec<u8>>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let log2 = Arc::clone(&log);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut first = String::new();
                if reader.read_line(&mut first).is_err() {
                    continue;
                }
                let path = first.split_whitespace().nth(1).unwrap_or("/").to_string();
                let mut range = None;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.trim().eq_ignore_ascii_case("range") {
                            range = Some(v.trim().to_string());
                        }
                    }
                }
                log2.lock().unwrap().push(Logged {
                    path: path.clone(),
                    range: range.clone(),
                });
                let name = path.trim_start_matches('/');
                let (status, extra, body): (&str, String, Vec<u8>) = match files.get(name) {
                    None if name == "fail" => ("500 Internal Server Error", String::new(), b"boom".to_vec()),
                    None => ("404 Not Found", String::new(), Vec::new()),
                    Some(data) => {
                        let start = range
                            .as_deref()
                            .and_then(|r| r.strip_prefix("bytes="))
                            .and_then(|r| r.trim_end_matches('-').parse::<usize>().ok());
                        match start {
                            None => ("200 OK", String::new(), data.clone()),
                            Some(s) if s >= data.len() => (
                                "416 Range Not Satisfiable",
                                format!("Content-Range: bytes */{}\r\n", data.len()),
                                Vec::new(),
                            ),
                            Some(s) => (
                                "206 Partial Content",
                                format!("Content-Range: bytes {}-{}/{}\r\n", s, data.len() - 1, data.len()),
                                data[s..].to_vec(),
                            ),
                        }
                    }
                };
                let head = format!(
                    "HTTP/1.1 {status}\r\nContent-Length: {}\r\n{extra}Connection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
            }
        });
        FixtureServer { base, log }
    }

    pub fn url(&self, name: &str) -> String {
        format!("{}/{name}", self.base)
    }

    pub fn requests(&self) -> Vec<Logged> {
        self.log.lock().unwrap().clone()
    }
}
