mod common;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use fbsdiff::codec::{IdentityCodec, LatentCodec, RemoteCodec};
use fbsdiff::denoiser::{NoisePredictor, RemoteDenoiser};
use fbsdiff::wire::{encode_request, read_response, Request, Response};
use fbsdiff::{
    BandKind, CodecSpec, Conditioning, DenoiserSpec, Error, FeatureMap, OracleDenoiser, Pipeline, PipelineConfig,
    Schedule, Shape,
};

const TIMEOUT: Duration = Duration::from_secs(10);

fn latent() -> FeatureMap {
    let s = Shape::new(4, 6, 5);
    FeatureMap::new(s, (0..s.len()).map(|k| ((k as f32) * 0.3).sin()).collect()).unwrap()
}

#[test]
fn remote_eps_matches_local_oracle() {
    let addr = common::spawn_oracle_server(1.5);
    let mut remote = RemoteDenoiser::connect(&addr, TIMEOUT).unwrap();
    let mut local = OracleDenoiser::new(1.5).unwrap();
    let s = Schedule::default();
    let z = latent();
    for t in [0, 20, 480, 1000] {
        for cond in [Conditioning::Null, Conditioning::Text("ünïcode prompt".into())] {
            let a = remote.predict_eps(&z, t, &cond, &s).unwrap();
            let b = local.predict_eps(&z, t, &cond, &s).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn remote_eps_is_deterministic() {
    let addr = common::spawn_oracle_server(1.0);
    let mut remote = RemoteDenoiser::connect(&addr, TIMEOUT).unwrap();
    let s = Schedule::default();
    let a = remote.predict_eps(&latent(), 300, &Conditioning::Null, &s).unwrap();
    let b = remote.predict_eps(&latent(), 300, &Conditioning::Null, &s).unwrap();
    assert_eq!(a, b);
}

#[test]
fn remote_codec_round_trip() {
    let addr = common::spawn_oracle_server(1.0);
    let mut codec = RemoteCodec::connect(&addr, TIMEOUT).unwrap();
    let img = common::smooth_image(8, 10);
    let z = codec.encode(&img).unwrap();
    assert_eq!(z, IdentityCodec.encode(&img).unwrap());
    assert_eq!(codec.decode(&z).unwrap(), img);
}

#[test]
fn error_status_becomes_backend_error() {
    let addr = common::spawn_failing_server("model not loaded");
    let mut remote = RemoteDenoiser::connect(&addr, TIMEOUT).unwrap();
    let err = remote
        .predict_eps(&latent(), 10, &Conditioning::Null, &Schedule::default())
        .unwrap_err();
    assert!(matches!(&err, Error::Backend(m) if m.contains("model not loaded")), "{err}");
}

#[test]
fn unreachable_backend_is_reported() {
    // bind then drop to get a port with no listener
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = RemoteDenoiser::connect(&format!("127.0.0.1:{port}"), TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
}

#[test]
fn bad_handshake_is_rejected() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = [0u8; 6];
        s.read_exact(&mut buf).unwrap();
        s.write_all(b"NOPE\x01\x00").unwrap();
    });
    let err = RemoteDenoiser::connect(&addr, TIMEOUT).unwrap_err();
    assert!(err.to_string().contains("handshake"), "{err}");
}

#[test]
fn wrong_shape_reply_is_protocol_violation() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        let _ = fbsdiff::wire::serve_connection(s, |_| Ok(FeatureMap::zeros(Shape::new(1, 1, 1))));
    });
    let mut remote = RemoteDenoiser::connect(&addr, TIMEOUT).unwrap();
    let err = remote
        .predict_eps(&latent(), 10, &Conditioning::Null, &Schedule::default())
        .unwrap_err();
    assert!(err.to_string().contains("shape"), "{err}");
}

#[test]
fn server_reports_unknown_opcode() {
    let addr = common::spawn_oracle_server(1.0);
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(b"FBSD\x01\x00").unwrap();
    let mut echo = [0u8; 6];
    s.read_exact(&mut echo).unwrap();
    assert_eq!(&echo, b"FBSD\x01\x00");
    let mut frame = encode_request(&Request::decode(latent()));
    frame[0] = 9;
    s.write_all(&frame).unwrap();
    match read_response(&mut s).unwrap() {
        Response::Error(msg) => assert!(msg.contains("opcode"), "{msg}"),
        other => panic!("expected error, got {other:?}"),
    }
}

#[test]
fn pipeline_over_remote_matches_local() {
    let addr = common::spawn_oracle_server(1.0);
    let cfg = PipelineConfig {
        t_inv: 100,
        steps: 20,
        band: BandKind::Low { th: 6 },
        prompt: "a red barn".into(),
        seed: 5,
        ..PipelineConfig::default()
    };
    let img = common::smooth_image(16, 16);
    let remote_cfg = PipelineConfig {
        denoiser: DenoiserSpec::Remote { address: addr.clone() },
        codec: CodecSpec::Remote(addr),
        ..cfg.clone()
    };
    let mut remote = Pipeline::from_config(Schedule::default(), remote_cfg, TIMEOUT).unwrap();
    let mut local = Pipeline::from_config(Schedule::default(), cfg, TIMEOUT).unwrap();
    let a = remote.run(&img).unwrap();
    let b = local.run(&img).unwrap();
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.image, b.image);
}

#[test]
fn remote_failure_aborts_with_stage() {
    let addr = common::spawn_failing_server("cuda oom");
    let cfg = PipelineConfig {
        t_inv: 10,
        steps: 5,
        denoiser: DenoiserSpec::Remote { address: addr },
        ..PipelineConfig::default()
    };
    let mut p = Pipeline::from_config(Schedule::default(), cfg, TIMEOUT).unwrap();
    let err = p.run(&common::smooth_image(8, 8)).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "inversion", .. }), "{err}");
}
