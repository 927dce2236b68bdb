use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{wire, Classifier};
use crate::error::{Error, Result};

/// Answers wire-protocol requests from `model` until `stop` is set.
///
/// Each connection gets its own detached thread that lives until the peer
/// disconnects. A request that decodes but cannot be served yields an error
/// frame and the connection stays open; a frame that cannot be delimited
/// closes the connection after the error frame.
pub fn serve(listener: TcpListener, model: Arc<dyn Classifier>, max_batch: usize, stop: Arc<AtomicBool>) -> Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("connection from {peer}");
                stream.set_nonblocking(false)?;
                let model = Arc::clone(&model);
                let stop = Arc::clone(&stop);
                std::thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, model.as_ref(), max_batch, &stop) {
                        log::debug!("connection from {peer} ended: {e}");
                    }
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn handle_connection(mut stream: TcpStream, model: &dyn Classifier, max_batch: usize, stop: &AtomicBool) -> Result<()> {
    stream.set_nodelay(true).ok();
    loop {
        if stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        let frame = match wire::read_frame(&mut stream) {
            Ok(Some(frame)) => frame,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = stream.write_all(&wire::encode_error(&e.to_string()));
                return Err(e);
            }
        };
        let reply = match answer(&frame, model, max_batch) {
            Ok(bytes) => bytes,
            Err(e) => wire::encode_error(&e.to_string()),
        };
        stream.write_all(&reply)?;
    }
}

fn answer(frame: &[u8], model: &dyn Classifier, max_batch: usize) -> Result<Vec<u8>> {
    let images = wire::decode_predict_request(frame)?;
    if images.len() > max_batch {
        return Err(Error::Protocol(format!("batch of {} exceeds limit {max_batch}", images.len())));
    }
    if let Some(shape) = model.input_shape() {
        if images[0].shape() != shape {
            return Err(Error::Protocol(format!("expected {shape} images, got {}", images[0].shape())));
        }
    }
    let rows = model.predict_batch(&images)?;
    wire::encode_predict_response(&rows)
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        self.stop.store(true, Ordering::Relaxed);
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| Error::Transport("server thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves in the background.
pub fn spawn_server(addr: &str, model: Arc<dyn Classifier>, max_batch: usize) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || serve(listener, model, max_batch, stop))
    };
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}
