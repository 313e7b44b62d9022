//! OS-process transport: each worker is a child process speaking wire
//! frames over its stdin and stdout.

use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread::JoinHandle;

use super::wire::{read_frame, write_frame};
use super::{ManagerEvent, ManagerTransport, Message, RuntimeError, WorkerEndpoint};

/// Frames over any byte stream pair, e.g. a worker's stdin and stdout.
pub struct StreamEndpoint<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: BufWriter<W>,
}

impl<R: Read, W: Write> StreamEndpoint<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader: BufReader::new(reader),
            writer: BufWriter::new(writer),
        }
    }
}

impl<R: Read, W: Write> WorkerEndpoint for StreamEndpoint<R, W> {
    fn recv(&mut self) -> Result<Option<Message>, RuntimeError> {
        Ok(read_frame(&mut self.reader)?)
    }

    fn send(&mut self, msg: &Message) -> Result<(), RuntimeError> {
        Ok(write_frame(&mut self.writer, msg)?)
    }
}

struct WorkerProcess {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    reader: Option<JoinHandle<()>>,
}

pub struct ProcessTransport {
    workers: Vec<WorkerProcess>,
    inbox: Receiver<ManagerEvent>,
}

impl ProcessTransport {
    /// Spawns `count` children built by `command(worker_id)`.
    pub fn spawn(count: usize, mut command: impl FnMut(usize) -> Command) -> Result<Self, RuntimeError> {
        let (tx, inbox) = mpsc::channel();
        let mut workers = Vec::with_capacity(count);
        for id in 0..count {
            let mut child = command(id)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| RuntimeError::Transport(format!("spawn worker {id}: {e}")))?;
            let stdin = child.stdin.take().map(BufWriter::new);
            let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            let tx = tx.clone();
            let reader = std::thread::spawn(move || loop {
                match read_frame(&mut stdout) {
                    Ok(Some(msg)) => {
                        if tx.send(ManagerEvent::Received(id, msg)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(ManagerEvent::Disconnected(id));
                        return;
                    }
                    Err(e) => {
                        log::warn!("worker {id}: {e}");
                        let _ = tx.send(ManagerEvent::Disconnected(id));
                        return;
                    }
                }
            });
            workers.push(WorkerProcess {
                child,
                stdin,
                reader: Some(reader),
            });
        }
        Ok(Self { workers, inbox })
    }

    fn close(&mut self) -> Result<(), RuntimeError> {
        let mut failed = Vec::new();
        for (id, w) in self.workers.iter_mut().enumerate() {
            w.stdin = None;
            match w.child.wait() {
                Ok(status) if !status.success() => failed.push(format!("worker {id} exited with {status}")),
                Ok(_) => {}
                Err(e) => failed.push(format!("worker {id}: {e}")),
            }
            if let Some(h) = w.reader.take() {
                let _ = h.join();
            }
        }
        for f in &failed {
            log::warn!("{f}");
        }
        Ok(())
    }
}

impl ManagerTransport for ProcessTransport {
    fn worker_count(&self) -> usize {
        self.workers.len()
    }

    fn send(&mut self, worker: usize, msg: &Message) -> Result<(), RuntimeError> {
        let stdin = self.workers[worker]
            .stdin
            .as_mut()
            .ok_or_else(|| RuntimeError::Transport(format!("worker {worker} closed")))?;
        Ok(write_frame(stdin, msg)?)
    }

    fn recv(&mut self) -> Result<ManagerEvent, RuntimeError> {
        self.inbox
            .recv()
            .map_err(|_| RuntimeError::Transport("every worker is gone".into()))
    }

    fn shutdown(&mut self) -> Result<(), RuntimeError> {
        self.close()
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        for w in &mut self.workers {
            if w.stdin.take().is_some() {
                let _ = w.child.kill();
            }
        }
        let _ = self.close();
    }
}
