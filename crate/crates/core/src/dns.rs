//! Minimal A-record DNS over UDP: the exit's upstream resolver, the gateway's
//! host resolver, and the leak trap all speak this.

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use hickory_proto::op::{Message, MessageType, OpCode, Query, ResponseCode};
use hickory_proto::rr::rdata::A;
use hickory_proto::rr::{Name, RData, Record, RecordType};
use tokio::net::UdpSocket;

pub const QUERY_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error)]
pub enum DnsError {
    #[error("invalid name {0:?}")]
    BadName(String),
    #[error("dns i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dns wire format: {0}")]
    Wire(String),
    #[error("dns query timed out")]
    Timeout,
}

pub fn build_query(id: u16, name: &str) -> Result<Vec<u8>, DnsError> {
    let name = Name::from_ascii(name).map_err(|_| DnsError::BadName(name.to_string()))?;
    let mut msg = Message::new();
    msg.set_id(id)
        .set_message_type(MessageType::Query)
        .set_op_code(OpCode::Query)
        .set_recursion_desired(true)
        .add_query(Query::query(name, RecordType::A));
    msg.to_vec().map_err(|e| DnsError::Wire(e.to_string()))
}

/// Name asked for in a query datagram, without the trailing dot.
pub fn query_name(datagram: &[u8]) -> Option<String> {
    let msg = Message::from_vec(datagram).ok()?;
    let q = msg.queries().first()?;
    let mut s = q.name().to_ascii();
    if s.ends_with('.') {
        s.pop();
    }
    Some(s)
}

/// Answer a query datagram from a static map. NXDOMAIN when unknown.
pub fn answer_query(datagram: &[u8], hosts: &HashMap<String, Ipv4Addr>) -> Option<Vec<u8>> {
    let query = Message::from_vec(datagram).ok()?;
    let mut resp = Message::new();
    resp.set_id(query.id())
        .set_message_type(MessageType::Response)
        .set_op_code(OpCode::Query)
        .set_recursion_desired(query.recursion_desired())
        .set_recursion_available(true);
    let mut found = false;
    for q in query.queries() {
        resp.add_query(q.clone());
        let mut name = q.name().to_ascii().to_ascii_lowercase();
        if name.ends_with('.') {
            name.pop();
        }
        if q.query_type() == RecordType::A {
            if let Some(ip) = hosts.get(&name) {
                resp.add_answer(Record::from_rdata(q.name().clone(), 60, RData::A(A(*ip))));
                found = true;
            }
        }
    }
    if !found {
        resp.set_response_code(ResponseCode::NXDomain);
    }
    resp.to_vec().ok()
}

fn first_a(datagram: &[u8], id: u16) -> Result<Option<Ipv4Addr>, DnsError> {
    let msg = Message::from_vec(datagram).map_err(|e| DnsError::Wire(e.to_string()))?;
    if msg.id() != id {
        return Err(DnsError::Wire("mismatched id".into()));
    }
    Ok(msg.answers().iter().find_map(|r| match r.data() {
        Some(RData::A(a)) => Some(a.0),
        _ => None,
    }))
}

/// Ask `server` for the A record of `name`.
pub async fn query_a(server: SocketAddr, name: &str) -> Result<Option<Ipv4Addr>, DnsError> {
    let id: u16 = rand::random();
    let query = build_query(id, name)?;
    let bind: SocketAddr = if server.is_ipv4() {
        "0.0.0.0:0".parse().unwrap()
    } else {
        "[::]:0".parse().unwrap()
    };
    let sock = UdpSocket::bind(bind).await?;
    sock.send_to(&query, server).await?;
    let mut buf = vec![0u8; 1500];
    let fut = async {
        loop {
            let (n, from) = sock.recv_from(&mut buf).await?;
            if from == server {
                return first_a(&buf[..n], id);
            }
        }
    };
    tokio::time::timeout(QUERY_TIMEOUT, fut)
        .await
        .map_err(|_| DnsError::Timeout)?
}

/// Name resolution backend for exits and gateways.
#[derive(Debug, Clone)]
pub enum Resolver {
    Static(Arc<HashMap<String, Ipv4Addr>>),
    Dns(SocketAddr),
}

impl Default for Resolver {
    fn default() -> Self {
        let mut map = HashMap::new();
        map.insert("localhost".to_string(), Ipv4Addr::LOCALHOST);
        Resolver::Static(Arc::new(map))
    }
}

impl Resolver {
    pub fn from_map(map: HashMap<String, Ipv4Addr>) -> Self {
        let map = map
            .into_iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), v))
            .collect();
        Resolver::Static(Arc::new(map))
    }

    /// Parse an `/etc/hosts`-style file: `address name [aliases...]`.
    pub fn parse_hosts(text: &str) -> Result<Self, String> {
        let mut map = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let ip: Ipv4Addr = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("line {}: expected IPv4 address", lineno + 1))?;
            let mut any = false;
            for name in parts {
                map.insert(name.to_ascii_lowercase(), ip);
                any = true;
            }
            if !any {
                return Err(format!("line {}: missing host name", lineno + 1));
            }
        }
        Ok(Self::from_map(map))
    }

    /// IP literals short-circuit; otherwise consult the backend.
    pub async fn resolve(&self, host: &str) -> Option<Ipv4Addr> {
        if let Ok(ip) = host.parse::<Ipv4Addr>() {
            return Some(ip);
        }
        match self {
            Resolver::Static(map) => map.get(&host.to_ascii_lowercase()).copied(),
            Resolver::Dns(server) => query_a(*server, host).await.ok().flatten(),
        }
    }
}

/// Split `host:port`, IPv4 or name only.
pub fn split_host_port(s: &str) -> Option<(&str, u16)> {
    let (host, port) = s.rsplit_once(':')?;
    if host.is_empty() || host.contains(':') {
        return None;
    }
    Some((host, port.parse().ok()?))
}
