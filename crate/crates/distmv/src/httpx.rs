//! Minimal HTTP/1.1 plumbing for the factory-worker protocol: a threaded
//! server handling one request per connection and a blocking client. Framing
//! is Content-Length only; that is all the protocol needs.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed request/response: {0}")]
    Malformed(String),
    #[error("server returned {status}: {body}")]
    Status { status: u16, body: String },
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub query: HashMap<String, String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    pub fn ok_json(value: &impl serde::Serialize) -> Response {
        Response {
            status: 200,
            content_type: "application/json",
            body: serde_json::to_vec(value).expect("serializable"),
        }
    }

    pub fn ok_bytes(body: Vec<u8>) -> Response {
        Response {
            status: 200,
            content_type: "application/octet-stream",
            body,
        }
    }

    pub fn status(status: u16, msg: &str) -> Response {
        Response {
            status,
            content_type: "text/plain",
            body: msg.as_bytes().to_vec(),
        }
    }
}

fn parse_query(path_q: &str) -> (String, HashMap<String, String>) {
    match path_q.split_once('?') {
        Some((p, q)) => {
            let map = q
                .split('&')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
            (p.to_string(), map)
        }
        None => (path_q.to_string(), HashMap::new()),
    }
}

fn read_request(stream: &mut TcpStream) -> Result<Request, HttpError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts
        .next()
        .ok_or_else(|| HttpError::Malformed("empty request line".into()))?
        .to_string();
    let target = parts
        .next()
        .ok_or_else(|| HttpError::Malformed("missing request target".into()))?;
    let (path, query) = parse_query(target);
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v
                    .trim()
                    .parse()
                    .map_err(|_| HttpError::Malformed("bad content-length".into()))?;
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok(Request {
        method,
        path,
        query,
        body,
    })
}

fn write_response(stream: &mut TcpStream, resp: &Response) -> Result<(), HttpError> {
    let head = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        resp.status,
        match resp.status {
            200 => "OK",
            204 => "No Content",
            404 => "Not Found",
            409 => "Conflict",
            410 => "Gone",
            503 => "Service Unavailable",
            _ => "Status",
        },
        resp.content_type,
        resp.body.len()
    );
    // single buffered write so small responses go out in one segment
    let mut buf = Vec::with_capacity(head.len() + resp.body.len());
    buf.extend_from_slice(head.as_bytes());
    buf.extend_from_slice(&resp.body);
    stream.write_all(&buf)?;
    stream.flush()?;
    Ok(())
}

/// Serve forever on the listener, one thread per connection; the handler is
/// shared. Returns the spawn handle so the caller can keep the server alive.
pub fn serve<H>(listener: TcpListener, handler: Arc<H>) -> std::thread::JoinHandle<()>
where
    H: Fn(Request) -> Response + Send + Sync + 'static,
{
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let handler = Arc::clone(&handler);
            std::thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                let _ = stream.set_read_timeout(Some(Duration::from_secs(60)));
                match read_request(&mut stream) {
                    Ok(req) => {
                        let resp = handler(req);
                        let _ = write_response(&mut stream, &resp);
                    }
                    Err(_) => {
                        let _ = write_response(&mut stream, &Response::status(400, "bad request"));
                    }
                }
            });
        }
    })
}

/// One blocking request; connection per call.
pub fn request(
    addr: &SocketAddr,
    method: &str,
    path_query: &str,
    body: &[u8],
    timeout: Duration,
) -> Result<(u16, Vec<u8>), HttpError> {
    let mut stream = TcpStream::connect_timeout(addr, timeout)?;
    let _ = stream.set_nodelay(true);
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let head = format!(
        "{method} {path_query} HTTP/1.1\r\nHost: {addr}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let mut buf = Vec::with_capacity(head.len() + body.len());
    buf.extend_from_slice(head.as_bytes());
    buf.extend_from_slice(body);
    stream.write_all(&buf)?;
    stream.flush()?;

    let mut reader = BufReader::new(stream);
    let mut status_line = String::new();
    reader.read_line(&mut status_line)?;
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| HttpError::Malformed(format!("bad status line `{status_line}`")))?;
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        if header.trim_end().is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v
                    .trim()
                    .parse()
                    .map_err(|_| HttpError::Malformed("bad content-length".into()))?;
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok((status, body))
}

/// Request returning an error on any non-2xx status.
pub fn request_ok(
    addr: &SocketAddr,
    method: &str,
    path_query: &str,
    body: &[u8],
    timeout: Duration,
) -> Result<Vec<u8>, HttpError> {
    let (status, body) = request(addr, method, path_query, body, timeout)?;
    if (200..300).contains(&status) {
        Ok(body)
    } else {
        Err(HttpError::Status {
            status,
            body: String::from_utf8_lossy(&body).into_owned(),
        })
    }
}
