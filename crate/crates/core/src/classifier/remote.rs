use std::io::Write;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use super::{wire, Classifier, ProbabilityVector};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

const DEFAULT_RETRIES: u32 = 3;

/// Client for a classifier served over the wire protocol.
///
/// Requests on one client are serialized over a single connection; a
/// transport failure drops the connection and the request is retried on a
/// fresh one, a bounded number of times.
#[derive(Debug)]
pub struct RemoteClassifier {
    endpoint: String,
    shape: Shape,
    num_classes: usize,
    retries: u32,
    timeout: Duration,
    conn: Mutex<Option<TcpStream>>,
}

impl RemoteClassifier {
    /// Connects to `endpoint` and learns the class count from a probe
    /// prediction on a mid-gray image of `shape`.
    pub fn connect(endpoint: &str, shape: Shape) -> Result<Self> {
        let mut client = Self {
            endpoint: endpoint.to_string(),
            shape,
            num_classes: 0,
            retries: DEFAULT_RETRIES,
            timeout: Duration::from_secs(60),
            conn: Mutex::new(None),
        };
        let probe = ImageTensor::filled(shape, 0.5)?;
        let rows = client.request(std::slice::from_ref(&probe))?;
        client.num_classes = rows[0].len();
        Ok(client)
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn open(&self) -> Result<TcpStream> {
        let addrs = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("resolving {}: {e}", self.endpoint)))?;
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout)).ok();
                    s.set_nodelay(true).ok();
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Transport(format!(
            "cannot connect to {}: {}",
            self.endpoint,
            last.map(|e| e.to_string()).unwrap_or_else(|| "no addresses".into())
        )))
    }

    fn request(&self, images: &[ImageTensor]) -> Result<Vec<ProbabilityVector>> {
        let frame = wire::encode_predict_request(images)?;
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut attempt = 0;
        loop {
            let result = (|| -> Result<Vec<ProbabilityVector>> {
                if guard.is_none() {
                    *guard = Some(self.open()?);
                }
                let stream = guard.as_mut().unwrap();
                stream.write_all(&frame).map_err(|e| Error::Transport(e.to_string()))?;
                let reply =
                    wire::read_frame(stream)?.ok_or_else(|| Error::Transport("server closed the connection".into()))?;
                wire::decode_predict_response(&reply)
            })();
            match result {
                Err(Error::Transport(msg)) if attempt < self.retries => {
                    attempt += 1;
                    log::warn!("transport failure to {} (attempt {attempt}): {msg}", self.endpoint);
                    *guard = None;
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                }
                Err(e) => {
                    *guard = None;
                    return Err(e);
                }
                Ok(rows) if rows.len() != images.len() => {
                    *guard = None;
                    return Err(Error::Protocol(format!("sent {} images, received {} rows", images.len(), rows.len())));
                }
                Ok(rows) => return Ok(rows),
            }
        }
    }
}

impl Classifier for RemoteClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> Option<Shape> {
        Some(self.shape)
    }

    fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<ProbabilityVector>> {
        self.request(images)
    }
}
