#![allow(dead_code)]

use std::net::{TcpListener, TcpStream};
use std::thread;

use fbsdiff::denoiser::NoisePredictor;
use fbsdiff::wire::{serve_connection, Opcode};
use fbsdiff::{FeatureMap, OracleDenoiser, Schedule};

/// Serves the oracle denoiser (EPS) and an identity codec (ENCODE/DECODE)
/// over the wire protocol on an ephemeral port. One thread per connection.
pub fn spawn_oracle_server(sigma: f64) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            thread::spawn(move || serve_oracle(stream, sigma));
        }
    });
    addr
}

fn serve_oracle(stream: TcpStream, sigma: f64) {
    let schedule = Schedule::default();
    let mut oracle = OracleDenoiser::new(sigma).unwrap();
    let _ = serve_connection(stream, |req| match req.opcode {
        Opcode::Eps => oracle
            .predict_eps(&req.payload, req.timestep as usize, &req.cond, &schedule)
            .map_err(|e| e.to_string()),
        Opcode::Encode | Opcode::Decode => Ok(req.payload.clone()),
    });
}

/// A server that answers every frame with an error status.
pub fn spawn_failing_server(message: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            thread::spawn(move || {
                let _ = serve_connection(stream, |_| Err::<FeatureMap, _>(message.to_string()));
            });
        }
    });
    addr
}

pub fn smooth_image(h: usize, w: usize) -> fbsdiff::ImageBuffer {
    let px = (0..h * w)
        .map(|k| {
            let (i, j) = ((k / w) as f32, (k % w) as f32);
            [
                (128.0 + 90.0 * (i / 9.0).sin()) as u8,
                (128.0 + 70.0 * (j / 7.0).cos()) as u8,
                (40.0 + 3.0 * (i + j)) as u8,
            ]
        })
        .collect();
    fbsdiff::ImageBuffer::new(h, w, px).unwrap()
}
