//! Minimal blocking client over the raw framed transport, used by synthetic
//! clients and tests.

use crate::protocol::{read_frame, write_frame, ClientMsg, ProtocolError, ServerMsg};
use cotransport::mdp::ACTION_DIM;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

pub struct Client {
    stream: TcpStream,
    seq: u64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        Ok(Self { stream, seq: 0 })
    }

    fn next(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn send(&mut self, msg: &ClientMsg) -> Result<(), ProtocolError> {
        write_frame(&mut self.stream, msg)
    }

    pub fn cmd(&mut self, a: [f64; ACTION_DIM]) -> Result<(), ProtocolError> {
        let seq = self.next();
        self.send(&ClientMsg::Cmd { seq, a: a.to_vec() })
    }

    pub fn reset(&mut self, seed: u64) -> Result<(), ProtocolError> {
        let seq = self.next();
        self.send(&ClientMsg::Reset { seq, seed })
    }

    pub fn pause(&mut self) -> Result<(), ProtocolError> {
        let seq = self.next();
        self.send(&ClientMsg::Pause { seq })
    }

    pub fn resume(&mut self) -> Result<(), ProtocolError> {
        let seq = self.next();
        self.send(&ClientMsg::Resume { seq })
    }

    pub fn set_read_timeout(&self, t: Duration) -> Result<(), ProtocolError> {
        self.stream.set_read_timeout(Some(t))?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<ServerMsg, ProtocolError> {
        read_frame(&mut self.stream)
    }
}
