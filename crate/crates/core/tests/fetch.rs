mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use mapseries::corpus::{
    fetch_tiles, CorpusError, FetchRequest, Manifest, Split, TileKind, TileRegion, TileSource,
};
use mapseries::TileImage;

type Handler = dyn Fn(&str, usize) -> (u16, Vec<u8>) + Send + Sync;

/// Minimal HTTP/1.1 server. The handler sees the request path and how many
/// times that path was requested before.
struct MockServer {
    url: String,
    hits: Arc<Mutex<BTreeMap<String, usize>>>,
}

impl MockServer {
    fn start(handler: Box<Handler>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(Mutex::new(BTreeMap::new()));
        let log = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request = String::new();
                if reader.read_line(&mut request).is_err() {
                    continue;
                }
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                }
                let path = request.split_whitespace().nth(1).unwrap_or("/").to_string();
                let seen = {
                    let mut h = log.lock().unwrap();
                    let n = h.entry(path.clone()).or_insert(0);
                    *n += 1;
                    *n - 1
                };
                let (status, body) = handler(&path, seen);
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: image/png\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
            }
        });
        MockServer { url, hits }
    }

    fn source(&self) -> TileSource {
        let mut s = TileSource::new(format!("{}/{{z}}/{{x}}/{{y}}.png", self.url), 200.0, 2);
        s.backoff_ms = 1;
        s
    }

    fn total_hits(&self) -> usize {
        self.hits.lock().unwrap().values().sum()
    }
}

fn tile_for(path: &str) -> Vec<u8> {
    let seed = path
        .bytes()
        .fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(u64::from(b)));
    random_tile(&mut rng(seed), 8).to_png()
}

fn request(zooms: std::ops::RangeInclusive<u8>) -> FetchRequest {
    FetchRequest {
        city: "tokyo".into(),
        kind: TileKind::Rsi,
        split: Split::Test,
        region: TileRegion {
            zoom: 16,
            x_min: 100,
            x_max: 101,
            y_min: 200,
            y_max: 201,
        },
        zooms,
    }
}

#[test]
fn downloads_region_across_zooms() {
    let server = MockServer::start(Box::new(|p, _| (200, tile_for(p))));
    let dir = tempfile::tempdir().unwrap();
    let out = fetch_tiles(
        &server.source(),
        &request(15..=17),
        dir.path(),
        &Manifest::default(),
    )
    .unwrap();
    assert_eq!(out.downloaded, 16 + 4 + 1);
    assert_eq!(out.manifest.entries().len(), 21);
    let bytes = std::fs::read(dir.path().join("tokyo/rsi/17/200/400.png")).unwrap();
    assert_eq!(bytes, tile_for("/17/200/400.png"));
    assert!(out
        .manifest
        .entries()
        .iter()
        .all(|e| e.split == Split::Test && e.city == "tokyo"));
}

#[test]
fn retries_transient_errors() {
    let server = MockServer::start(Box::new(|p, seen| {
        if seen == 0 {
            (500, b"busy".to_vec())
        } else {
            (200, tile_for(p))
        }
    }));
    let dir = tempfile::tempdir().unwrap();
    let out = fetch_tiles(
        &server.source(),
        &request(16..=16),
        dir.path(),
        &Manifest::default(),
    )
    .unwrap();
    assert_eq!(out.downloaded, 4);
    assert_eq!(server.total_hits(), 8);
}

#[test]
fn permanent_failures_are_listed() {
    let server = MockServer::start(Box::new(|p, _| {
        if p.contains("/101/") {
            (404, Vec::new())
        } else {
            (200, tile_for(p))
        }
    }));
    let dir = tempfile::tempdir().unwrap();
    let err = fetch_tiles(
        &server.source(),
        &request(16..=16),
        dir.path(),
        &Manifest::default(),
    )
    .unwrap_err();
    match err {
        CorpusError::Fetch { failed, fetched } => {
            let xs: Vec<u32> = failed.iter().map(|(c, _)| c.x).collect();
            assert_eq!(xs, [101, 101]);
            assert_eq!(fetched.len(), 2);
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(server.total_hits(), 2 + 2 * 3);
}

#[test]
fn non_png_body_is_a_failure() {
    let server = MockServer::start(Box::new(|_, _| (200, b"<html>".to_vec())));
    let dir = tempfile::tempdir().unwrap();
    let err = fetch_tiles(
        &server.source(),
        &request(16..=16),
        dir.path(),
        &Manifest::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, CorpusError::Fetch { ref failed, .. } if failed.len() == 4),
        "{err}"
    );
}

#[test]
fn existing_files_are_not_refetched() {
    let server = MockServer::start(Box::new(|p, _| (200, tile_for(p))));
    let dir = tempfile::tempdir().unwrap();
    let first = fetch_tiles(
        &server.source(),
        &request(16..=16),
        dir.path(),
        &Manifest::default(),
    )
    .unwrap();
    let again = fetch_tiles(
        &server.source(),
        &request(16..=16),
        dir.path(),
        &first.manifest,
    )
    .unwrap();
    assert_eq!(again.downloaded, 0);
    assert_eq!(again.manifest, first.manifest);
    assert_eq!(server.total_hits(), 4);
}

#[test]
fn checksum_mismatch_is_integrity_error() {
    let server = MockServer::start(Box::new(|p, seen| {
        if seen == 0 {
            (200, tile_for(p))
        } else {
            (200, TileImage::filled(8, [1, 2, 3]).unwrap().to_png())
        }
    }));
    let dir = tempfile::tempdir().unwrap();
    let first = fetch_tiles(
        &server.source(),
        &request(16..=16),
        dir.path(),
        &Manifest::default(),
    )
    .unwrap();
    std::fs::remove_file(dir.path().join("tokyo/rsi/16/100/200.png")).unwrap();
    let err = fetch_tiles(
        &server.source(),
        &request(16..=16),
        dir.path(),
        &first.manifest,
    )
    .unwrap_err();
    assert!(
        matches!(err, CorpusError::Integrity { coord, .. } if coord.x == 100 && coord.y == 200),
        "{err}"
    );
}

#[test]
fn requests_are_rate_limited() {
    let server = MockServer::start(Box::new(|p, _| (200, tile_for(p))));
    let dir = tempfile::tempdir().unwrap();
    let mut src = server.source();
    src.rate = 20.0;
    let start = Instant::now();
    fetch_tiles(&src, &request(16..=16), dir.path(), &Manifest::default()).unwrap();
    assert!(
        start.elapsed() >= Duration::from_millis(150),
        "{:?}",
        start.elapsed()
    );
}

#[test]
fn invalid_sources_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TileSource::new("http://localhost/{z}/{x}.png", 1.0, 0);
    assert!(matches!(
        fetch_tiles(&bad, &request(16..=16), dir.path(), &Manifest::default()),
        Err(CorpusError::Source(_))
    ));
    let zero = TileSource::new("http://localhost/{z}/{x}/{y}.png", 0.0, 0);
    assert!(fetch_tiles(&zero, &request(16..=16), dir.path(), &Manifest::default()).is_err());
}

#[test]
fn region_covering_scales_with_zoom() {
    let r = request(16..=16).region;
    assert_eq!(r.covering(16).len(), 4);
    assert_eq!(r.covering(17).len(), 16);
    assert_eq!(r.covering(15).len(), 1);
    assert_eq!(r.covering(14)[0].x, 25);
}
