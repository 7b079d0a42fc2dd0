//! Binary request/response framing for a remote backbone.
//!
//! All integers are little-endian. A connection opens with the client
//! sending `"FBSD"` followed by the `u16` protocol version; the server
//! echoes the same six bytes. Each request frame is
//!
//! ```text
//! opcode u8 | timestep u32 (EPS only) | cond-kind u8 | [text-len u32 | utf-8] | c h w u32 | c*h*w f32
//! ```
//!
//! and each response is `status u8` followed by either a shape-prefixed
//! `f32` payload (status 0) or `len u32 | utf-8 message` (status 1).
//!
//! Timesteps are schedule indices: `t` names ᾱ_t = Π_{i≤t} α_i, and 0 is
//! the clean latent.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::denoiser::Conditioning;
use crate::error::{Error, Result};
use crate::spectral::{FeatureMap, Shape};

pub const MAGIC: [u8; 4] = *b"FBSD";
pub const PROTOCOL_VERSION: u16 = 1;
pub const TIMEOUT_ENV: &str = "FBSDIFF_REMOTE_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;

const MAX_TEXT_BYTES: u32 = 1 << 20;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Eps = 1,
    Encode = 2,
    Decode = 3,
}

impl TryFrom<u8> for Opcode {
    type Error = u8;

    fn try_from(v: u8) -> std::result::Result<Self, u8> {
        match v {
            1 => Ok(Opcode::Eps),
            2 => Ok(Opcode::Encode),
            3 => Ok(Opcode::Decode),
            other => Err(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub opcode: Opcode,
    /// Only carried on the wire for [`Opcode::Eps`].
    pub timestep: u32,
    pub cond: Conditioning,
    pub payload: FeatureMap,
}

impl Request {
    pub fn eps(timestep: u32, cond: Conditioning, z_t: FeatureMap) -> Self {
        Self {
            opcode: Opcode::Eps,
            timestep,
            cond,
            payload: z_t,
        }
    }

    pub fn encode(pixels: FeatureMap) -> Self {
        Self {
            opcode: Opcode::Encode,
            timestep: 0,
            cond: Conditioning::Null,
            payload: pixels,
        }
    }

    pub fn decode(latent: FeatureMap) -> Self {
        Self {
            opcode: Opcode::Decode,
            timestep: 0,
            cond: Conditioning::Null,
            payload: latent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ok(FeatureMap),
    Error(String),
}

/// Frame-level failure while reading.
#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("unknown cond-kind {0}")]
    UnknownCondKind(u8),
    #[error("unknown status {0}")]
    UnknownStatus(u8),
    #[error("bad handshake: expected FBSD v{PROTOCOL_VERSION}, got {0:?}")]
    Handshake([u8; 6]),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<FrameError> for Error {
    fn from(e: FrameError) -> Self {
        Error::Backend(format!("protocol violation: {e}"))
    }
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn handshake_bytes() -> [u8; 6] {
    let mut hs = [0u8; 6];
    hs[..4].copy_from_slice(&MAGIC);
    hs[4..].copy_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    hs
}

pub fn client_handshake<S: Read + Write>(stream: &mut S) -> std::result::Result<(), FrameError> {
    let hs = handshake_bytes();
    stream.write_all(&hs)?;
    stream.flush()?;
    let mut echo = [0u8; 6];
    stream.read_exact(&mut echo)?;
    if echo != hs {
        return Err(FrameError::Handshake(echo));
    }
    Ok(())
}

pub fn server_handshake<S: Read + Write>(stream: &mut S) -> std::result::Result<(), FrameError> {
    let mut got = [0u8; 6];
    stream.read_exact(&mut got)?;
    if got != handshake_bytes() {
        return Err(FrameError::Handshake(got));
    }
    stream.write_all(&got)?;
    stream.flush()?;
    Ok(())
}

fn write_tensor(out: &mut Vec<u8>, map: &FeatureMap) {
    let s = map.shape();
    for d in [s.channels, s.height, s.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut impl Read) -> std::result::Result<FeatureMap, FrameError> {
    let (c, h, w) = (read_u32(r)?, read_u32(r)?, read_u32(r)?);
    let n = c as u64 * h as u64 * w as u64;
    if n == 0 || n > MAX_ELEMENTS {
        return Err(FrameError::Malformed(format!("tensor shape {c}x{h}x{w}")));
    }
    let mut raw = vec![0u8; n as usize * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureMap::new(Shape::new(c as usize, h as usize, w as usize), data)
        .map_err(|e| FrameError::Malformed(e.to_string()))
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_string(r: &mut impl Read) -> std::result::Result<String, FrameError> {
    let len = read_u32(r)?;
    if len > MAX_TEXT_BYTES {
        return Err(FrameError::Malformed(format!("text length {len} too large")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| FrameError::Malformed("text is not valid UTF-8".into()))
}

pub fn encode_request(req: &Request) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + req.payload.data().len() * 4);
    out.push(req.opcode as u8);
    if req.opcode == Opcode::Eps {
        out.extend_from_slice(&req.timestep.to_le_bytes());
    }
    match &req.cond {
        Conditioning::Null => out.push(0),
        Conditioning::Text(text) => {
            out.push(1);
            write_string(&mut out, text);
        }
    }
    write_tensor(&mut out, &req.payload);
    out
}

pub fn read_request(r: &mut impl Read) -> std::result::Result<Request, FrameError> {
    let op = read_u8(r)?;
    let opcode = Opcode::try_from(op).map_err(FrameError::UnknownOpcode)?;
    let timestep = if opcode == Opcode::Eps { read_u32(r)? } else { 0 };
    let cond = match read_u8(r)? {
        0 => Conditioning::Null,
        1 => Conditioning::Text(read_string(r)?),
        k => return Err(FrameError::UnknownCondKind(k)),
    };
    let payload = read_tensor(r)?;
    Ok(Request {
        opcode,
        timestep,
        cond,
        payload,
    })
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut out = Vec::new();
    match resp {
        Response::Ok(map) => {
            out.push(0);
            write_tensor(&mut out, map);
        }
        Response::Error(msg) => {
            out.push(1);
            write_string(&mut out, msg);
        }
    }
    out
}

pub fn read_response(r: &mut impl Read) -> std::result::Result<Response, FrameError> {
    match read_u8(r)? {
        0 => Ok(Response::Ok(read_tensor(r)?)),
        1 => Ok(Response::Error(read_string(r)?)),
        s => Err(FrameError::UnknownStatus(s)),
    }
}

/// Timeout from `FBSDIFF_REMOTE_TIMEOUT_MS`, falling back to 60 s.
pub fn remote_timeout() -> Duration {
    let ms = std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(DEFAULT_TIMEOUT_MS);
    Duration::from_millis(ms)
}

/// A handshaken connection carrying one request at a time.
#[derive(Debug)]
pub struct RemoteClient {
    address: String,
    stream: TcpStream,
    poisoned: bool,
}

impl RemoteClient {
    pub fn connect(address: &str, timeout: Duration) -> Result<Self> {
        let backend = |e: io::Error| Error::Backend(format!("cannot reach {address}: {e}"));
        let addrs: Vec<_> = address.to_socket_addrs().map_err(backend)?.collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(mut stream) => {
                    stream.set_read_timeout(Some(timeout)).map_err(backend)?;
                    stream.set_write_timeout(Some(timeout)).map_err(backend)?;
                    stream.set_nodelay(true).ok();
                    client_handshake(&mut stream).map_err(|e| {
                        Error::Backend(format!("handshake with {address} failed: {e}"))
                    })?;
                    return Ok(Self {
                        address: address.to_string(),
                        stream,
                        poisoned: false,
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(backend(last.unwrap_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing")
        })))
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    /// Sends one request and waits for its response. An `Ok` payload is returned
    /// as-is; an error status becomes [`Error::Backend`].
    pub fn call(&mut self, req: &Request) -> Result<FeatureMap> {
        if self.poisoned {
            return Err(Error::Backend(format!(
                "connection to {} is unusable after an earlier protocol failure",
                self.address
            )));
        }
        let result = self.round_trip(req);
        if result.is_err() {
            self.poisoned = true;
        }
        match result? {
            Response::Ok(map) => Ok(map),
            Response::Error(msg) => Err(Error::Backend(format!(
                "{} replied with error: {msg}",
                self.address
            ))),
        }
    }

    fn round_trip(&mut self, req: &Request) -> Result<Response> {
        let frame = encode_request(req);
        self.stream
            .write_all(&frame)
            .and_then(|_| self.stream.flush())
            .map_err(|e| Error::Backend(format!("send to {} failed: {e}", self.address)))?;
        read_response(&mut self.stream).map_err(|e| match e {
            FrameError::Io(io) => Error::Backend(format!("receive from {} failed: {io}", self.address)),
            other => other.into(),
        })
    }
}

/// Serves one connection: handshake, then answer frames until EOF.
///
/// A frame that cannot be parsed gets an error response and ends the
/// connection, since the stream can no longer be resynchronised.
pub fn serve_connection<S, F>(mut stream: S, mut handler: F) -> io::Result<()>
where
    S: Read + Write,
    F: FnMut(&Request) -> std::result::Result<FeatureMap, String>,
{
    match server_handshake(&mut stream) {
        Ok(()) => {}
        Err(FrameError::Io(e)) => return Err(e),
        Err(_) => return Ok(()),
    }
    loop {
        let req = match read_request(&mut stream) {
            Ok(r) => r,
            Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e),
            Err(e) => {
                stream.write_all(&encode_response(&Response::Error(e.to_string())))?;
                stream.flush()?;
                return Ok(());
            }
        };
        let resp = match handler(&req) {
            Ok(map) => Response::Ok(map),
            Err(msg) => Response::Error(msg),
        };
        stream.write_all(&encode_response(&resp))?;
        stream.flush()?;
    }
}
