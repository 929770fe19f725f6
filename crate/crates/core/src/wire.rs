//! Binary framing for the inter-module event stream and control messages.
//!
//! Every frame is `"DWIZ" | version u8 | msg_type u8 | payload_len u32 BE |
//! payload`. All integers are big-endian and fixed width; strings carry an
//! explicit length prefix. See `docs/wire-format.md` for the byte layout.

use std::io::{self, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::model::{AttrValue, Attrs, Event, EventKind, ProcessId, Relation, SeqIndex};
use crate::module::{Direction, Feature, Interface, ModuleDescriptor, ModuleState};

pub const MAGIC: [u8; 4] = *b"DWIZ";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 1 << 20;

pub const MSG_EVENT: u8 = 0x01;
pub const MSG_RELATION: u8 = 0x02;
pub const MSG_HELLO: u8 = 0x03;
pub const MSG_REGISTER: u8 = 0x04;
pub const MSG_END_OF_STREAM: u8 = 0x05;
pub const MSG_WIRE_DIRECTIVE: u8 = 0x06;
pub const MSG_STATUS: u8 = 0x07;
pub const MSG_FINDINGS: u8 = 0x08;

const TAG_U64: u8 = 0;
const TAG_I64: u8 = 1;
const TAG_F64: u8 = 2;
const TAG_STR: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Event(Event),
    Relation(Relation),
    Hello { process_count: u32 },
    Register(ModuleDescriptor),
    EndOfStream,
    WireDirective { producer_id: u32, consumer_address: String },
    Status { module_id: u32, state: ModuleState },
    /// Analysis results travelling with the stream, as a JSON document.
    Findings(String),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Event(_) => MSG_EVENT,
            Message::Relation(_) => MSG_RELATION,
            Message::Hello { .. } => MSG_HELLO,
            Message::Register(_) => MSG_REGISTER,
            Message::EndOfStream => MSG_END_OF_STREAM,
            Message::WireDirective { .. } => MSG_WIRE_DIRECTIVE,
            Message::Status { .. } => MSG_STATUS,
            Message::Findings(_) => MSG_FINDINGS,
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported protocol version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
    #[error("stream ended in the middle of a frame")]
    Truncated,
    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversize(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("field out of range: {0}")]
    Invalid(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("could not connect to {address}: {source}")]
    ConnectFailed { address: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::Invalid(format!("string of {} bytes", s.len())))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_ids(out: &mut Vec<u8>, ids: &[u32]) -> Result<(), WireError> {
    let n = u16::try_from(ids.len()).map_err(|_| WireError::Invalid("too many ids".into()))?;
    out.extend_from_slice(&n.to_be_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_be_bytes());
    }
    Ok(())
}

fn encode_payload(message: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    match message {
        Message::Event(e) => {
            out.extend_from_slice(&e.process.0.to_be_bytes());
            out.extend_from_slice(&e.index.0.to_be_bytes());
            out.extend_from_slice(&e.kind.code().to_be_bytes());
            let count = u16::try_from(e.attrs.len())
                .map_err(|_| WireError::Invalid("more than 65535 attributes".into()))?;
            out.extend_from_slice(&count.to_be_bytes());
            for (key, value) in &e.attrs {
                if key.len() > crate::model::MAX_ATTR_NAME {
                    return Err(WireError::Invalid(format!("attribute name `{key}` too long")));
                }
                put_str16(&mut out, key)?;
                match value {
                    AttrValue::U64(v) => {
                        out.push(TAG_U64);
                        out.extend_from_slice(&v.to_be_bytes());
                    }
                    AttrValue::I64(v) => {
                        out.push(TAG_I64);
                        out.extend_from_slice(&v.to_be_bytes());
                    }
                    AttrValue::F64(v) => {
                        out.push(TAG_F64);
                        out.extend_from_slice(&v.to_bits().to_be_bytes());
                    }
                    AttrValue::Str(s) => {
                        if s.len() > crate::model::MAX_ATTR_STRING {
                            return Err(WireError::Invalid(format!("string attribute `{key}` too long")));
                        }
                        out.push(TAG_STR);
                        out.extend_from_slice(&(s.len() as u32).to_be_bytes());
                        out.extend_from_slice(s.as_bytes());
                    }
                }
            }
        }
        Message::Relation(r) => {
            out.extend_from_slice(&r.send.process.0.to_be_bytes());
            out.extend_from_slice(&r.send.index.0.to_be_bytes());
            out.extend_from_slice(&r.recv.process.0.to_be_bytes());
            out.extend_from_slice(&r.recv.index.0.to_be_bytes());
        }
        Message::Hello { process_count } => out.extend_from_slice(&process_count.to_be_bytes()),
        Message::Register(d) => {
            out.extend_from_slice(&d.id.to_be_bytes());
            put_str16(&mut out, &d.name)?;
            let n = u16::try_from(d.interfaces.len())
                .map_err(|_| WireError::Invalid("too many interfaces".into()))?;
            out.extend_from_slice(&n.to_be_bytes());
            for i in &d.interfaces {
                put_str16(&mut out, &i.name)?;
                out.push(match i.direction {
                    Direction::In => 0,
                    Direction::Out => 1,
                });
                put_str16(&mut out, &i.address)?;
            }
            out.push(d.features.iter().fold(0, |acc, f| acc | f.bit()));
            out.push(d.status.code());
            put_ids(&mut out, &d.producers)?;
            put_ids(&mut out, &d.consumers)?;
        }
        Message::EndOfStream => {}
        Message::WireDirective {
            producer_id,
            consumer_address,
        } => {
            out.extend_from_slice(&producer_id.to_be_bytes());
            put_str16(&mut out, consumer_address)?;
        }
        Message::Status { module_id, state } => {
            out.extend_from_slice(&module_id.to_be_bytes());
            out.push(state.code());
        }
        Message::Findings(json) => out.extend_from_slice(json.as_bytes()),
    }
    Ok(out)
}

/// Encodes one message as a complete frame.
pub fn encode(message: &Message) -> Result<Vec<u8>, WireError> {
    let payload = encode_payload(message)?;
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::Oversize(payload.len()));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(message.msg_type());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed("payload shorter than its fields".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String, WireError> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("invalid UTF-8".into()))
    }

    fn str16(&mut self) -> Result<String, WireError> {
        let len = self.u16()? as usize;
        self.string(len)
    }

    fn ids(&mut self) -> Result<Vec<u32>, WireError> {
        let n = self.u16()?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{} trailing payload bytes", self.buf.len())))
        }
    }
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor { buf: payload };
    let message = match msg_type {
        MSG_EVENT => {
            let process = ProcessId(c.u32()?);
            let index = SeqIndex(c.u64()?);
            let kind = EventKind::from_code(c.u16()?).map_err(|e| WireError::Malformed(e.to_string()))?;
            let count = c.u16()?;
            let mut attrs = Attrs::new();
            for _ in 0..count {
                let key = c.str16()?;
                let value = match c.u8()? {
                    TAG_U64 => AttrValue::U64(c.u64()?),
                    TAG_I64 => AttrValue::I64(c.u64()? as i64),
                    TAG_F64 => AttrValue::F64(f64::from_bits(c.u64()?)),
                    TAG_STR => {
                        let len = c.u32()? as usize;
                        AttrValue::Str(c.string(len)?)
                    }
                    t => return Err(WireError::Malformed(format!("unknown value tag {t}"))),
                };
                attrs.insert(key, value);
            }
            Message::Event(Event {
                process,
                index,
                kind,
                attrs,
            })
        }
        MSG_RELATION => {
            let (p, i, q, j) = (c.u32()?, c.u64()?, c.u32()?, c.u64()?);
            Message::Relation(Relation::new(p, i, q, j))
        }
        MSG_HELLO => Message::Hello {
            process_count: c.u32()?,
        },
        MSG_REGISTER => {
            let id = c.u32()?;
            let name = c.str16()?;
            let n = c.u16()?;
            let mut interfaces = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let name = c.str16()?;
                let direction = match c.u8()? {
                    0 => Direction::In,
                    1 => Direction::Out,
                    d => return Err(WireError::Malformed(format!("unknown direction {d}"))),
                };
                let address = c.str16()?;
                interfaces.push(Interface {
                    name,
                    direction,
                    address,
                });
            }
            let bits = c.u8()?;
            if bits & !0b11 != 0 {
                return Err(WireError::Malformed(format!("unknown feature bits {bits:#04x}")));
            }
            let features = [Feature::Send, Feature::Receive]
                .into_iter()
                .filter(|f| bits & f.bit() != 0)
                .collect();
            let code = c.u8()?;
            let status = ModuleState::from_code(code)
                .ok_or_else(|| WireError::Malformed(format!("unknown state code {code}")))?;
            let producers = c.ids()?;
            let consumers = c.ids()?;
            Message::Register(ModuleDescriptor {
                id,
                name,
                interfaces,
                features,
                status,
                producers,
                consumers,
            })
        }
        MSG_END_OF_STREAM => Message::EndOfStream,
        MSG_WIRE_DIRECTIVE => Message::WireDirective {
            producer_id: c.u32()?,
            consumer_address: c.str16()?,
        },
        MSG_STATUS => {
            let module_id = c.u32()?;
            let code = c.u8()?;
            let state = ModuleState::from_code(code)
                .ok_or_else(|| WireError::Malformed(format!("unknown state code {code}")))?;
            Message::Status { module_id, state }
        }
        MSG_FINDINGS => {
            let len = c.buf.len();
            Message::Findings(c.string(len)?)
        }
        t => return Err(WireError::UnknownMsgType(t)),
    };
    c.finish()?;
    Ok(message)
}

/// Decodes exactly one frame; the slice must hold nothing else.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    let mut decoder = FrameDecoder::new();
    decoder.push(frame);
    let message = decoder.next_message()?.ok_or(WireError::Truncated)?;
    decoder.finish()?;
    Ok(message)
}

fn known_msg_type(t: u8) -> bool {
    (MSG_EVENT..=MSG_FINDINGS).contains(&t)
}

/// Incremental frame decoder. Bytes may arrive in chunks of any size; a
/// partial frame stays buffered until the rest arrives.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Returns the next complete message, `Ok(None)` if more bytes are needed.
    /// Header errors surface as soon as the offending byte is buffered.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        let pending = &self.buf[self.start..];
        let seen = pending.len().min(MAGIC.len());
        if pending[..seen] != MAGIC[..seen] {
            return Err(WireError::BadMagic);
        }
        if pending.len() > 4 && pending[4] != VERSION {
            return Err(WireError::BadVersion(pending[4]));
        }
        if pending.len() > 5 && !known_msg_type(pending[5]) {
            return Err(WireError::UnknownMsgType(pending[5]));
        }
        if pending.len() < HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_be_bytes(pending[6..10].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::Oversize(len));
        }
        if pending.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let message = decode_payload(pending[5], &pending[HEADER_LEN..HEADER_LEN + len])?;
        self.start += HEADER_LEN + len;
        if self.start > 64 * 1024 && self.start * 2 > self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        Ok(Some(message))
    }

    /// Call once the source is closed; fails if a partial frame remains.
    pub fn finish(&self) -> Result<(), WireError> {
        if self.buffered() == 0 {
            Ok(())
        } else {
            Err(WireError::Truncated)
        }
    }
}

/// Decodes every frame in a byte sequence delivered in `chunks`.
pub fn decode_stream<'a, I>(chunks: I) -> Result<Vec<Message>, WireError>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut decoder = FrameDecoder::new();
    let mut out = Vec::new();
    for chunk in chunks {
        decoder.push(chunk);
        while let Some(m) = decoder.next_message()? {
            out.push(m);
        }
    }
    decoder.finish()?;
    Ok(out)
}

pub struct MessageWriter<W: Write> {
    inner: BufWriter<W>,
}

impl<W: Write> MessageWriter<W> {
    pub fn new(inner: W) -> Self {
        MessageWriter {
            inner: BufWriter::new(inner),
        }
    }

    pub fn send(&mut self, message: &Message) -> Result<(), WireError> {
        self.inner.write_all(&encode(message)?)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), WireError> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn get_ref(&self) -> &W {
        self.inner.get_ref()
    }
}

pub struct MessageReader<R: Read> {
    inner: R,
    decoder: FrameDecoder,
    chunk: Box<[u8]>,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        MessageReader {
            inner,
            decoder: FrameDecoder::new(),
            chunk: vec![0; 16 * 1024].into_boxed_slice(),
        }
    }

    /// Next message, or `Ok(None)` when the source closes on a frame boundary.
    pub fn recv(&mut self) -> Result<Option<Message>, WireError> {
        loop {
            if let Some(m) = self.decoder.next_message()? {
                return Ok(Some(m));
            }
            let n = match self.inner.read(&mut self.chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                self.decoder.finish()?;
                return Ok(None);
            }
            self.decoder.push(&self.chunk[..n]);
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }
}

/// Payload items carried on a data stream between `Hello` and `EndOfStream`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataItem {
    Event(Event),
    Relation(Relation),
    Findings(String),
}

impl From<DataItem> for Message {
    fn from(item: DataItem) -> Self {
        match item {
            DataItem::Event(e) => Message::Event(e),
            DataItem::Relation(r) => Message::Relation(r),
            DataItem::Findings(f) => Message::Findings(f),
        }
    }
}

/// Writing half of a data stream. `Hello` is written on construction.
pub struct DataSender<W: Write> {
    writer: MessageWriter<W>,
    finished: bool,
}

impl<W: Write> DataSender<W> {
    pub fn new(inner: W, process_count: u32) -> Result<Self, WireError> {
        let mut writer = MessageWriter::new(inner);
        writer.send(&Message::Hello { process_count })?;
        Ok(DataSender {
            writer,
            finished: false,
        })
    }

    pub fn send(&mut self, item: DataItem) -> Result<(), WireError> {
        if self.finished {
            return Err(WireError::ProtocolViolation("data after EndOfStream".into()));
        }
        self.writer.send(&item.into())
    }

    pub fn finish(&mut self) -> Result<(), WireError> {
        if !self.finished {
            self.writer.send(&Message::EndOfStream)?;
            self.finished = true;
        }
        self.writer.flush()
    }
}

/// Reading half of a data stream; enforces `Hello` first and a terminating
/// `EndOfStream`.
pub struct DataReceiver<R: Read> {
    reader: MessageReader<R>,
    process_count: u32,
    done: bool,
}

impl<R: Read> DataReceiver<R> {
    pub fn new(inner: R) -> Result<Self, WireError> {
        let mut reader = MessageReader::new(inner);
        match reader.recv()? {
            Some(Message::Hello { process_count }) => Ok(DataReceiver {
                reader,
                process_count,
                done: false,
            }),
            Some(other) => Err(WireError::ProtocolViolation(format!(
                "expected Hello, got message type {:#04x}",
                other.msg_type()
            ))),
            None => Err(WireError::ProtocolViolation("stream closed before Hello".into())),
        }
    }

    pub fn process_count(&self) -> u32 {
        self.process_count
    }

    pub fn is_complete(&self) -> bool {
        self.done
    }

    /// Next item; `Ok(None)` once `EndOfStream` has been seen.
    pub fn recv(&mut self) -> Result<Option<DataItem>, WireError> {
        if self.done {
            return Ok(None);
        }
        match self.reader.recv()? {
            Some(Message::Event(e)) => Ok(Some(DataItem::Event(e))),
            Some(Message::Relation(r)) => Ok(Some(DataItem::Relation(r))),
            Some(Message::Findings(f)) => Ok(Some(DataItem::Findings(f))),
            Some(Message::EndOfStream) => {
                self.done = true;
                Ok(None)
            }
            Some(other) => Err(WireError::ProtocolViolation(format!(
                "unexpected message type {:#04x} on a data stream",
                other.msg_type()
            ))),
            None => Err(WireError::ProtocolViolation("stream closed before EndOfStream".into())),
        }
    }
}

impl<R: Read> Iterator for DataReceiver<R> {
    type Item = Result<DataItem, WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.recv().transpose()
    }
}

/// Connects to `address` ("host:port", optionally prefixed with `tcp://`),
/// retrying up to `attempts` times.
pub fn connect(address: &str, attempts: u32, delay: Duration) -> Result<TcpStream, WireError> {
    let address = strip_scheme(address);
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        if attempt > 0 {
            thread::sleep(delay);
        }
        match address.to_socket_addrs().and_then(|mut addrs| {
            addrs
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))
                .and_then(TcpStream::connect)
        }) {
            Ok(stream) => {
                stream.set_nodelay(true).ok();
                return Ok(stream);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(WireError::ConnectFailed {
        address: address.to_owned(),
        source: last.unwrap_or_else(|| io::Error::other("no attempts made")),
    })
}

pub fn strip_scheme(address: &str) -> &str {
    address.strip_prefix("tcp://").unwrap_or(address)
}

/// Opens the producer side of a data stream and sends `Hello`.
pub fn open_data_stream(
    address: &str,
    process_count: u32,
    attempts: u32,
) -> Result<DataSender<TcpStream>, WireError> {
    let stream = connect(address, attempts, Duration::from_millis(100))?;
    DataSender::new(stream, process_count)
}

/// Accepts one producer on `listener` and reads its `Hello`.
pub fn accept_data_stream(listener: &TcpListener) -> Result<DataReceiver<TcpStream>, WireError> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true).ok();
    DataReceiver::new(stream)
}
