//! The SOCKS5 subset the gateway speaks: no authentication, CONNECT, IPv4
//! and DOMAIN address types.

use std::net::{Ipv4Addr, SocketAddr};

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const VERSION: u8 = 0x05;
pub const METHOD_NO_AUTH: u8 = 0x00;
pub const METHOD_NONE_ACCEPTABLE: u8 = 0xFF;
pub const CMD_CONNECT: u8 = 0x01;
pub const ATYP_IPV4: u8 = 0x01;
pub const ATYP_DOMAIN: u8 = 0x03;
pub const ATYP_IPV6: u8 = 0x04;

/// Reply codes.
pub const REP_SUCCEEDED: u8 = 0x00;
pub const REP_GENERAL_FAILURE: u8 = 0x01;
pub const REP_HOST_UNREACHABLE: u8 = 0x04;
pub const REP_CONNECTION_REFUSED: u8 = 0x05;
pub const REP_COMMAND_NOT_SUPPORTED: u8 = 0x07;
pub const REP_ADDRESS_NOT_SUPPORTED: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetAddr {
    Ipv4(Ipv4Addr, u16),
    Domain(String, u16),
}

impl TargetAddr {
    pub fn port(&self) -> u16 {
        match self {
            TargetAddr::Ipv4(_, p) | TargetAddr::Domain(_, p) => *p,
        }
    }

    /// "host:port" as sent in BEGIN.
    pub fn to_destination(&self) -> String {
        match self {
            TargetAddr::Ipv4(ip, port) => format!("{ip}:{port}"),
            TargetAddr::Domain(name, port) => format!("{name}:{port}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SocksError {
    #[error("socks i/o: {0}")]
    Io(#[from] std::io::Error),
    /// Negotiation ended with the given reply already sent to the client.
    #[error("socks request rejected with reply {0:#04x}")]
    Rejected(u8),
    #[error("proxy answered {0:#04x}")]
    Reply(u8),
    #[error("malformed proxy response")]
    Malformed,
}

/// Server side of negotiation up to and including the request. On error
/// the appropriate reply has already been written.
pub async fn accept_request<S>(s: &mut S) -> Result<TargetAddr, SocksError>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let mut head = [0u8; 2];
    s.read_exact(&mut head).await?;
    if head[0] != VERSION {
        send_reply(s, REP_COMMAND_NOT_SUPPORTED).await?;
        return Err(SocksError::Rejected(REP_COMMAND_NOT_SUPPORTED));
    }
    let mut methods = vec![0u8; head[1] as usize];
    s.read_exact(&mut methods).await?;
    if !methods.contains(&METHOD_NO_AUTH) {
        s.write_all(&[VERSION, METHOD_NONE_ACCEPTABLE]).await?;
        s.flush().await?;
        return Err(SocksError::Rejected(METHOD_NONE_ACCEPTABLE));
    }
    s.write_all(&[VERSION, METHOD_NO_AUTH]).await?;
    s.flush().await?;

    let mut req = [0u8; 4];
    s.read_exact(&mut req).await?;
    if req[0] != VERSION || req[1] != CMD_CONNECT {
        send_reply(s, REP_COMMAND_NOT_SUPPORTED).await?;
        return Err(SocksError::Rejected(REP_COMMAND_NOT_SUPPORTED));
    }
    let target = match req[3] {
        ATYP_IPV4 => {
            let mut a = [0u8; 4];
            s.read_exact(&mut a).await?;
            let port = s.read_u16().await?;
            TargetAddr::Ipv4(Ipv4Addr::from(a), port)
        }
        ATYP_DOMAIN => {
            let len = s.read_u8().await? as usize;
            let mut name = vec![0u8; len];
            s.read_exact(&mut name).await?;
            let port = s.read_u16().await?;
            match String::from_utf8(name) {
                Ok(n) if !n.is_empty() && !n.contains(':') => TargetAddr::Domain(n, port),
                _ => {
                    send_reply(s, REP_GENERAL_FAILURE).await?;
                    return Err(SocksError::Rejected(REP_GENERAL_FAILURE));
                }
            }
        }
        _ => {
            send_reply(s, REP_ADDRESS_NOT_SUPPORTED).await?;
            return Err(SocksError::Rejected(REP_ADDRESS_NOT_SUPPORTED));
        }
    };
    Ok(target)
}

/// Reply with a zero IPv4 bound address.
pub async fn send_reply<S>(s: &mut S, code: u8) -> std::io::Result<()>
where
    S: AsyncWrite + Unpin,
{
    s.write_all(&[VERSION, code, 0x00, ATYP_IPV4, 0, 0, 0, 0, 0, 0])
        .await?;
    s.flush().await
}

/// Client side: negotiate no-auth and CONNECT to `target` through the proxy
/// stream `s`.
pub async fn client_connect<S>(s: &mut S, target: &TargetAddr) -> Result<(), SocksError>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    s.write_all(&[VERSION, 1, METHOD_NO_AUTH]).await?;
    let mut choice = [0u8; 2];
    s.read_exact(&mut choice).await?;
    if choice != [VERSION, METHOD_NO_AUTH] {
        return Err(SocksError::Reply(choice[1]));
    }
    let mut req = vec![VERSION, CMD_CONNECT, 0x00];
    match target {
        TargetAddr::Ipv4(ip, port) => {
            req.push(ATYP_IPV4);
            req.extend_from_slice(&ip.octets());
            req.extend_from_slice(&port.to_be_bytes());
        }
        TargetAddr::Domain(name, port) => {
            req.push(ATYP_DOMAIN);
            req.push(name.len() as u8);
            req.extend_from_slice(name.as_bytes());
            req.extend_from_slice(&port.to_be_bytes());
        }
    }
    s.write_all(&req).await?;
    let mut reply = [0u8; 4];
    s.read_exact(&mut reply).await?;
    if reply[0] != VERSION {
        return Err(SocksError::Malformed);
    }
    let skip = match reply[3] {
        ATYP_IPV4 => 4 + 2,
        ATYP_IPV6 => 16 + 2,
        ATYP_DOMAIN => s.read_u8().await? as usize + 2,
        _ => return Err(SocksError::Malformed),
    };
    let mut rest = vec![0u8; skip];
    s.read_exact(&mut rest).await?;
    if reply[1] != REP_SUCCEEDED {
        return Err(SocksError::Reply(reply[1]));
    }
    Ok(())
}

/// Open a TCP connection to `proxy` and CONNECT through it.
pub async fn connect_via(
    proxy: SocketAddr,
    target: &TargetAddr,
) -> Result<tokio::net::TcpStream, SocksError> {
    let mut s = tokio::net::TcpStream::connect(proxy).await?;
    let _ = s.set_nodelay(true);
    client_connect(&mut s, target).await?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn server_sees(bytes: &[u8]) -> (Result<TargetAddr, SocksError>, Vec<u8>) {
        let (mut client, mut server) = tokio::io::duplex(1024);
        client.write_all(bytes).await.unwrap();
        let r = accept_request(&mut server).await;
        drop(server);
        let mut out = Vec::new();
        client.read_to_end(&mut out).await.unwrap();
        (r, out)
    }

    #[tokio::test]
    async fn domain_connect() {
        let mut req = vec![5, 1, 0, 5, 1, 0, 3, 9];
        req.extend_from_slice(b"host.test");
        req.extend_from_slice(&80u16.to_be_bytes());
        let (r, out) = server_sees(&req).await;
        assert_eq!(r.unwrap(), TargetAddr::Domain("host.test".into(), 80));
        assert_eq!(out, [5, 0]);
    }

    #[tokio::test]
    async fn ipv4_connect() {
        let (r, _) = server_sees(&[5, 2, 2, 0, 5, 1, 0, 1, 127, 0, 0, 1, 0x1f, 0x90]).await;
        assert_eq!(r.unwrap(), TargetAddr::Ipv4(Ipv4Addr::LOCALHOST, 8080));
    }

    #[tokio::test]
    async fn no_acceptable_method() {
        let (r, out) = server_sees(&[5, 1, 2]).await;
        assert!(matches!(r, Err(SocksError::Rejected(0xFF))));
        assert_eq!(out, [5, 0xFF]);
    }

    #[tokio::test]
    async fn unsupported_command_and_version() {
        let (r, out) = server_sees(&[5, 1, 0, 5, 2, 0, 1, 1, 2, 3, 4, 0, 80]).await;
        assert!(matches!(r, Err(SocksError::Rejected(0x07))));
        assert_eq!(&out[2..4], [5, 7]);
        let (r, out) = server_sees(&[4, 1, 0]).await;
        assert!(matches!(r, Err(SocksError::Rejected(0x07))));
        assert_eq!(out[1], 7);
    }

    #[tokio::test]
    async fn ipv6_is_refused() {
        let mut req = vec![5, 1, 0, 5, 1, 0, 4];
        req.extend_from_slice(&[0u8; 18]);
        let (r, out) = server_sees(&req).await;
        assert!(matches!(r, Err(SocksError::Rejected(0x08))));
        assert_eq!(&out[2..4], [5, 8]);
    }
}
