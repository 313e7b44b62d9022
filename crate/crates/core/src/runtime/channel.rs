//! In-process transport: one thread per worker, messages over channels.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::{run_worker, ManagerEvent, ManagerTransport, Message, RuntimeError, WorkerEndpoint};
use crate::alm::AlmConfig;
use crate::problem::ProblemDef;

pub struct ChannelEndpoint {
    id: usize,
    rx: Receiver<Message>,
    tx: Sender<ManagerEvent>,
}

impl WorkerEndpoint for ChannelEndpoint {
    fn recv(&mut self) -> Result<Option<Message>, RuntimeError> {
        Ok(self.rx.recv().ok())
    }

    fn send(&mut self, msg: &Message) -> Result<(), RuntimeError> {
        self.tx
            .send(ManagerEvent::Received(self.id, msg.clone()))
            .map_err(|_| RuntimeError::Transport("manager inbox closed".into()))
    }
}

impl Drop for ChannelEndpoint {
    fn drop(&mut self) {
        let _ = self.tx.send(ManagerEvent::Disconnected(self.id));
    }
}

pub struct ChannelTransport {
    senders: Vec<Sender<Message>>,
    inbox: Receiver<ManagerEvent>,
    handles: Vec<JoinHandle<()>>,
}

impl ChannelTransport {
    /// Starts `count` threads, each running `body` on its own endpoint.
    pub fn spawn<F>(count: usize, body: F) -> Self
    where
        F: Fn(usize, &mut ChannelEndpoint) + Send + Sync + 'static,
    {
        let body = Arc::new(body);
        let (event_tx, inbox) = mpsc::channel();
        let mut senders = Vec::with_capacity(count);
        let mut handles = Vec::with_capacity(count);
        for id in 0..count {
            let (tx, rx) = mpsc::channel();
            senders.push(tx);
            let mut endpoint = ChannelEndpoint {
                id,
                rx,
                tx: event_tx.clone(),
            };
            let body = Arc::clone(&body);
            let handle = std::thread::Builder::new()
                .name(format!("apalm-worker-{id}"))
                .spawn(move || body(id, &mut endpoint))
                .expect("spawn worker thread");
            handles.push(handle);
        }
        Self { senders, inbox, handles }
    }

    pub fn spawn_workers(problem: &ProblemDef, alm: &AlmConfig, count: usize) -> Self {
        let (problem, alm) = (problem.clone(), alm.clone());
        Self::spawn(count, move |id, endpoint| {
            if let Err(e) = run_worker(&problem, &alm, id, endpoint) {
                log::error!("worker {id}: {e}");
            }
        })
    }
}

impl ManagerTransport for ChannelTransport {
    fn worker_count(&self) -> usize {
        self.senders.len()
    }

    fn send(&mut self, worker: usize, msg: &Message) -> Result<(), RuntimeError> {
        self.senders[worker]
            .send(msg.clone())
            .map_err(|_| RuntimeError::Transport(format!("worker {worker} is gone")))
    }

    fn recv(&mut self) -> Result<ManagerEvent, RuntimeError> {
        self.inbox
            .recv()
            .map_err(|_| RuntimeError::Transport("every worker is gone".into()))
    }

    fn shutdown(&mut self) -> Result<(), RuntimeError> {
        self.senders.clear();
        for h in self.handles.drain(..) {
            h.join().map_err(|_| RuntimeError::Transport("worker thread panicked".into()))?;
        }
        Ok(())
    }
}

impl Drop for ChannelTransport {
    fn drop(&mut self) {
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
