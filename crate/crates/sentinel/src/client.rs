//! Blocking control-connection client used by pipeline stages.

use std::net::TcpStream;
use std::time::Duration;

use evgraph_core::module::{ModuleDescriptor, ModuleState};
use evgraph_core::wire::{connect, Message, MessageReader, MessageWriter, WireError};

pub struct ControlClient {
    reader: MessageReader<TcpStream>,
    writer: MessageWriter<TcpStream>,
    descriptor: ModuleDescriptor,
}

impl ControlClient {
    /// Connects, registers, and waits for the assigned id.
    pub fn register(address: &str, descriptor: ModuleDescriptor, attempts: u32) -> Result<Self, WireError> {
        let stream = connect(address, attempts, Duration::from_millis(100))?;
        let mut writer = MessageWriter::new(stream.try_clone()?);
        let mut reader = MessageReader::new(stream);
        writer.send(&Message::Register(descriptor))?;
        writer.flush()?;
        match reader.recv()? {
            Some(Message::Register(assigned)) => Ok(ControlClient {
                reader,
                writer,
                descriptor: assigned,
            }),
            Some(other) => Err(WireError::ProtocolViolation(format!(
                "expected a Register reply, got message type {:#04x}",
                other.msg_type()
            ))),
            None => Err(WireError::ProtocolViolation("sentinel closed the connection during registration".into())),
        }
    }

    pub fn id(&self) -> u32 {
        self.descriptor.id
    }

    pub fn descriptor(&self) -> &ModuleDescriptor {
        &self.descriptor
    }

    pub fn set_status(&mut self, state: ModuleState) -> Result<(), WireError> {
        self.writer.send(&Message::Status {
            module_id: self.descriptor.id,
            state,
        })?;
        self.writer.flush()
    }

    /// Publishes a view document for the `/view` endpoint.
    pub fn send_view(&mut self, view: String) -> Result<(), WireError> {
        self.writer.send(&Message::Findings(view))?;
        self.writer.flush()
    }

    /// Blocks until the sentinel wires this module to a consumer and returns
    /// the consumer's address.
    pub fn wait_directive(&mut self, timeout: Option<Duration>) -> Result<String, WireError> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        let result = match self.reader.recv() {
            Ok(Some(Message::WireDirective { consumer_address, .. })) => Ok(consumer_address),
            Ok(Some(other)) => Err(WireError::ProtocolViolation(format!(
                "expected a WireDirective, got message type {:#04x}",
                other.msg_type()
            ))),
            Ok(None) => Err(WireError::ProtocolViolation("sentinel closed the control connection".into())),
            Err(e) => Err(e),
        };
        self.reader.get_ref().set_read_timeout(None)?;
        result
    }
}
