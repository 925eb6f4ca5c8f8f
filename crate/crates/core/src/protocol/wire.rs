//! Length-prefixed JSON wire codec and transports.
//!
//! Frame layout: 4-byte big-endian payload length, then exactly that many
//! bytes of UTF-8 JSON encoding one [`Message`]. The same codec runs over an
//! in-process channel or a TCP socket; both sides of a round trip are
//! byte-identical re-encodings of the message structs.

use super::message::Message;
use super::server::Server;
use std::io::{Read, Write};
use std::net::TcpStream;

/// Upper bound on a single frame's payload.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(u32),
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("connection closed")]
    Closed,
}

/// Writes one framed message.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    let body = serde_json::to_vec(msg)?;
    let len = body.len() as u32;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one framed message; `Closed` on clean EOF at a frame boundary.
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(WireError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

/// One request-reply exchange.
pub trait Transport {
    fn round_trip(&mut self, msg: &Message) -> Result<Message, WireError>;
}

/// Direct handle to an in-process server, with every message passed through
/// the byte codec so both transports exercise identical encoding.
pub struct InProcess<'a> {
    server: &'a mut Server,
}

impl<'a> InProcess<'a> {
    pub fn new(server: &'a mut Server) -> Self {
        InProcess { server }
    }
}

impl Transport for InProcess<'_> {
    fn round_trip(&mut self, msg: &Message) -> Result<Message, WireError> {
        let mut buf = Vec::new();
        write_message(&mut buf, msg)?;
        let decoded = read_message(&mut buf.as_slice())?;
        let reply = self.server.handle_message(decoded);
        let mut out = Vec::new();
        write_message(&mut out, &reply)?;
        read_message(&mut out.as_slice())
    }
}

/// Client side of a TCP connection.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: &str) -> Result<Self, WireError> {
        Ok(TcpTransport { stream: TcpStream::connect(addr)? })
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        TcpTransport { stream }
    }
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, msg: &Message) -> Result<Message, WireError> {
        write_message(&mut self.stream, msg)?;
        read_message(&mut self.stream)
    }
}

/// Serves one connection until the peer closes it.
pub fn serve_connection<S: Read + Write>(
    server: &mut Server,
    stream: &mut S,
) -> Result<usize, WireError> {
    let mut handled = 0;
    loop {
        let msg = match read_message(stream) {
            Ok(m) => m,
            Err(WireError::Closed) => return Ok(handled),
            Err(e) => return Err(e),
        };
        let reply = server.handle_message(msg);
        write_message(stream, &reply)?;
        handled += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use uuid::Uuid;

    #[test]
    fn frame_round_trip_is_byte_identical() {
        let m = Message::Request { request_id: Uuid::from_u128(9), prompt: vec![1, 2, 3] };
        let mut buf = Vec::new();
        write_message(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], &(buf.len() as u32 - 4).to_be_bytes());
        let back = read_message(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_message(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn eof_at_boundary_is_closed() {
        let empty: &[u8] = &[];
        assert!(matches!(read_message(&mut &*empty), Err(WireError::Closed)));
    }

    #[test]
    fn truncated_frame_is_io_error() {
        let m = Message::Audit { request_id: Uuid::from_u128(1) };
        let mut buf = Vec::new();
        write_message(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_message(&mut buf.as_slice()), Err(WireError::Io(_))));
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME_LEN + 1).to_be_bytes());
        assert!(matches!(read_message(&mut buf.as_slice()), Err(WireError::FrameTooLarge(_))));
    }

    #[test]
    fn garbage_payload_is_malformed() {
        let body = b"not json";
        let mut buf = Vec::new();
        buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
        buf.extend_from_slice(body);
        assert!(matches!(read_message(&mut buf.as_slice()), Err(WireError::Malformed(_))));
    }
}
