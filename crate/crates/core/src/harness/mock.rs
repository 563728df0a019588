//! A scripted worker speaking the wire protocol, for tests and local runs.

use std::collections::VecDeque;
use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::protocol::{recv, send, Message, ProtocolError, TaskId};

/// Accuracy reported for `(task, epoch, total_epochs)`.
pub type AccuracyFn = Arc<dyn Fn(TaskId, u32, u32) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct MockBehavior {
    /// Simulated time per epoch, or per latency-only task.
    pub latency: Duration,
    pub accuracy: AccuracyFn,
    /// Reported for latency-only tasks.
    pub latency_ms: f64,
    /// Drop the connection mid-way through the task with this index, after
    /// its first progress report.
    pub disconnect_on_task: Option<usize>,
    /// Answer the task with this index with a garbage line.
    pub malformed_on_task: Option<usize>,
    /// Send every result twice.
    pub duplicate_results: bool,
}

impl Default for MockBehavior {
    fn default() -> Self {
        MockBehavior {
            latency: Duration::ZERO,
            accuracy: Arc::new(|_, e, total| 0.9 * e as f64 / total.max(1) as f64),
            latency_ms: 1.0,
            disconnect_on_task: None,
            malformed_on_task: None,
            duplicate_results: false,
        }
    }
}

/// What a mock worker saw and sent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockLog {
    pub tasks: Vec<TaskId>,
    pub progress: Vec<(TaskId, u32)>,
    pub pruned: Vec<TaskId>,
    pub completed: Vec<TaskId>,
}

fn reader(stream: TcpStream) -> Receiver<Message> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut r = BufReader::new(stream);
        while let Ok(Some(m)) = recv(&mut r) {
            if tx.send(m).is_err() {
                break;
            }
        }
    });
    rx
}

/// Connect to `addr` and serve tasks until the dispatcher says bye or
/// closes the connection.
pub fn run_mock_worker(addr: SocketAddr, b: &MockBehavior) -> Result<MockLog, ProtocolError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let rx = reader(stream.try_clone()?);
    send(&mut stream, &Message::Hello)?;
    let mut log = MockLog::default();
    let mut backlog: VecDeque<Message> = VecDeque::new();
    loop {
        let m = match backlog.pop_front() {
            Some(m) => m,
            None => match rx.recv() {
                Ok(m) => m,
                Err(_) => return Ok(log),
            },
        };
        let (task_id, epochs) = match m {
            Message::Task { task_id, epochs, .. } => (task_id, epochs),
            Message::Bye => return Ok(log),
            _ => continue,
        };
        let index = log.tasks.len();
        log.tasks.push(task_id);
        let crash = b.disconnect_on_task == Some(index);
        if crash && epochs == 0 {
            let _ = stream.shutdown(std::net::Shutdown::Both);
            return Ok(log);
        }
        if b.malformed_on_task == Some(index) {
            stream.write_all(b"{\"type\": \"progress\", oops\n")?;
            // The dispatcher drops us; wait for the close.
            while rx.recv_timeout(Duration::from_secs(5)).is_ok() {}
            return Ok(log);
        }
        let mut pruned = false;
        let result = if epochs == 0 {
            thread::sleep(b.latency);
            Message::Result {
                task_id,
                accuracy: None,
                latency_ms: Some(b.latency_ms),
                reason: None,
            }
        } else {
            let mut acc = 0.0;
            for e in 1..=epochs {
                if !b.latency.is_zero() {
                    match rx.recv_timeout(b.latency) {
                        Ok(m) => backlog.push_back(m),
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => return Ok(log),
                    }
                }
                loop {
                    match rx.try_recv() {
                        Ok(m) => backlog.push_back(m),
                        Err(TryRecvError::Empty) => break,
                        Err(TryRecvError::Disconnected) => return Ok(log),
                    }
                }
                if let Some(p) = backlog
                    .iter()
                    .position(|m| matches!(m, Message::Prune { task_id: t, .. } if *t == task_id))
                {
                    backlog.remove(p);
                    pruned = true;
                    break;
                }
                acc = (b.accuracy)(task_id, e, epochs);
                send(
                    &mut stream,
                    &Message::Progress {
                        task_id,
                        epoch: e,
                        accuracy: acc,
                    },
                )?;
                log.progress.push((task_id, e));
                if crash {
                    let _ = stream.shutdown(std::net::Shutdown::Both);
                    return Ok(log);
                }
            }
            if pruned {
                log.pruned.push(task_id);
                Message::Result {
                    task_id,
                    accuracy: None,
                    latency_ms: None,
                    reason: Some("pruned".into()),
                }
            } else {
                Message::Result {
                    task_id,
                    accuracy: Some(acc),
                    latency_ms: Some(b.latency_ms),
                    reason: None,
                }
            }
        };
        if !pruned {
            log.completed.push(task_id);
        }
        send(&mut stream, &result)?;
        if b.duplicate_results {
            send(&mut stream, &result)?;
        }
    }
}

/// Spawn `n` mock workers on background threads.
pub fn spawn_mock_workers(
    addr: SocketAddr,
    n: usize,
    b: &MockBehavior,
) -> Vec<thread::JoinHandle<Result<MockLog, ProtocolError>>> {
    (0..n)
        .map(|_| {
            let b = b.clone();
            thread::spawn(move || run_mock_worker(addr, &b))
        })
        .collect()
}
