//! Reference generator plugin. Replies to every tile with the same bytes.
//!
//! `mapseries-echo-plugin [MODE]`, where MODE is one of
//!
//! * `echo` (default): return each request unchanged
//! * `refuse`: decline the handshake
//! * `wrong-size`: answer with a tile half the requested size
//! * `garbage`: answer with bytes that are not a PNG
//! * `bad-frame`: answer with a length prefix of `0xFFFFFFFF`
//! * `truncated`: announce a frame longer than what follows, then exit
//! * `hang`: read requests and never answer
//! * `exit`: exit with status 3 on the first request
//! * `noisy`: like `echo`, also writing a line to stderr per tile

use std::io::{self, BufRead, Write};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use mapseries::generators::plugin::{
    read_frame, write_frame, Handshake, HandshakeReply, PROTOCOL_VERSION,
};
use mapseries::TileImage;

fn reply(out: &mut impl Write, r: &HandshakeReply) -> io::Result<()> {
    let mut line = serde_json::to_string(r).expect("reply serializes");
    line.push('\n');
    out.write_all(line.as_bytes())?;
    out.flush()
}

fn run(mode: &str) -> io::Result<ExitCode> {
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let stdout = io::stdout();
    let mut out = stdout.lock();

    let mut line = String::new();
    input.read_line(&mut line)?;
    let hs: Handshake = match serde_json::from_str(line.trim()) {
        Ok(h) => h,
        Err(e) => {
            reply(
                &mut out,
                &HandshakeReply {
                    ok: false,
                    name: None,
                    reason: Some(format!("bad handshake: {e}")),
                },
            )?;
            return Ok(ExitCode::from(2));
        }
    };
    if mode == "refuse" || hs.protocol != PROTOCOL_VERSION {
        let reason = if mode == "refuse" {
            format!("edge {} not supported", hs.edge)
        } else {
            format!("protocol {} not supported", hs.protocol)
        };
        reply(
            &mut out,
            &HandshakeReply {
                ok: false,
                name: None,
                reason: Some(reason),
            },
        )?;
        return Ok(ExitCode::SUCCESS);
    }
    reply(
        &mut out,
        &HandshakeReply {
            ok: true,
            name: Some(format!("echo-{mode}")),
            reason: None,
        },
    )?;

    let mut served = 0u64;
    loop {
        let frame = match read_frame(&mut input) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(ExitCode::SUCCESS),
            Err(e) => {
                eprintln!("echo plugin: {e}");
                return Ok(ExitCode::from(2));
            }
        };
        served += 1;
        match mode {
            "wrong-size" => {
                let half = (hs.tile_size / 2).max(1);
                let tile = TileImage::filled(half, [0, 0, 0]).expect("positive size");
                write_frame(&mut out, &tile.to_png())?;
            }
            "garbage" => write_frame(&mut out, b"not a png")?,
            "bad-frame" => {
                out.write_all(&[0xFF; 4])?;
                out.flush()?;
            }
            "truncated" => {
                out.write_all(&(frame.len() as u32 + 100).to_be_bytes())?;
                out.write_all(&frame[..frame.len().min(8)])?;
                out.flush()?;
                return Ok(ExitCode::SUCCESS);
            }
            "hang" => loop {
                thread::sleep(Duration::from_secs(3600));
            },
            "exit" => {
                eprintln!("echo plugin: exiting on request {served}");
                return Ok(ExitCode::from(3));
            }
            "noisy" => {
                eprintln!("echo plugin: tile {served}, {} bytes", frame.len());
                write_frame(&mut out, &frame)?;
            }
            _ => write_frame(&mut out, &frame)?,
        }
    }
}

fn main() -> ExitCode {
    let mode = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "echo".to_string());
    const MODES: [&str; 9] = [
        "echo",
        "refuse",
        "wrong-size",
        "garbage",
        "bad-frame",
        "truncated",
        "hang",
        "exit",
        "noisy",
    ];
    if !MODES.contains(&mode.as_str()) {
        eprintln!(
            "unknown mode {mode:?}; expected one of {}",
            MODES.join(", ")
        );
        return ExitCode::from(2);
    }
    match run(&mode) {
        Ok(code) => code,
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("echo plugin: {e}");
            ExitCode::from(1)
        }
    }
}
