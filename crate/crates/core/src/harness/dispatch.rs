//! Task dispatcher.
//!
//! One dispatcher thread owns all state. An accept thread and one reader
//! thread per connection forward events over a channel, so no state is
//! shared between threads.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::protocol::{recv, send, Message, ProtocolError, TaskId};
use super::prune::{prune_decision, AccuracyCurve, Decision, PruneRule};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("duplicate task id {0}")]
    DuplicateTask(TaskId),
    #[error("no worker activity for {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One evaluation request. `epochs = 0` asks for latency only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalTask {
    pub task_id: TaskId,
    pub kernel_ir: String,
    pub epochs: u32,
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub theta: f64,
    /// Dispatches per task before it is failed.
    pub max_attempts: u32,
    /// Give up when no event arrives for this long.
    pub idle_timeout: Option<Duration>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            theta: 0.5,
            max_attempts: 3,
            idle_timeout: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TaskStatus {
    Completed,
    Pruned { epoch: u32, threshold: f64, accuracy: f64 },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskResult {
    pub task_id: TaskId,
    #[serde(flatten)]
    pub status: TaskStatus,
    pub accuracy: Option<f64>,
    pub latency_ms: Option<f64>,
    pub curve: AccuracyCurve,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderboardEntry {
    pub task_id: TaskId,
    pub accuracy: Option<f64>,
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HarnessReport {
    /// In task submission order.
    pub results: Vec<TaskResult>,
    /// Completed tasks, best accuracy first, then lowest latency.
    pub leaderboard: Vec<LeaderboardEntry>,
    pub best_curve: Option<AccuracyCurve>,
    /// From the first dispatch to the last result.
    #[serde(skip)]
    pub elapsed: Duration,
}

type ConnId = u64;

enum Event {
    Connected(ConnId, TcpStream),
    Message(ConnId, Message),
    Malformed(ConnId, String),
    Closed(ConnId),
}

struct Worker {
    writer: TcpStream,
    ready: bool,
    task: Option<TaskId>,
}

pub struct Harness {
    listener: TcpListener,
}

impl Harness {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Harness, HarnessError> {
        Ok(Harness {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, HarnessError> {
        Ok(self.listener.local_addr()?)
    }

    /// Serve `tasks` to connecting workers until every task has a result.
    pub fn run(self, tasks: Vec<EvalTask>, cfg: &HarnessConfig) -> Result<HarnessReport, HarnessError> {
        let addr = self.listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = Arc::clone(&stop);
            let listener = self.listener;
            thread::spawn(move || accept_loop(listener, tx, stop))
        };
        let mut d = Dispatcher::new(tasks, cfg)?;
        let outcome = d.run(&rx, cfg);
        stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(addr);
        let _ = accept.join();
        d.close_all();
        outcome?;
        Ok(d.report())
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next: ConnId = 0;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let Ok(writer) = stream.try_clone() else { continue };
        let id = next;
        next += 1;
        if tx.send(Event::Connected(id, writer)).is_err() {
            break;
        }
        let tx = tx.clone();
        thread::spawn(move || {
            let mut r = BufReader::new(stream);
            loop {
                match recv(&mut r) {
                    Ok(Some(m)) => {
                        if tx.send(Event::Message(id, m)).is_err() {
                            return;
                        }
                    }
                    Ok(None) | Err(ProtocolError::Io(_)) => break,
                    Err(ProtocolError::Malformed(msg)) => {
                        let _ = tx.send(Event::Malformed(id, msg));
                        break;
                    }
                }
            }
            let _ = tx.send(Event::Closed(id));
        });
    }
}

struct Dispatcher {
    order: Vec<TaskId>,
    tasks: HashMap<TaskId, EvalTask>,
    pending: VecDeque<TaskId>,
    attempts: HashMap<TaskId, u32>,
    curves: HashMap<TaskId, AccuracyCurve>,
    results: BTreeMap<TaskId, TaskResult>,
    workers: HashMap<ConnId, Worker>,
    rule: PruneRule,
    max_attempts: u32,
    started: Option<Instant>,
    finished: Option<Instant>,
}

impl Dispatcher {
    fn new(tasks: Vec<EvalTask>, cfg: &HarnessConfig) -> Result<Dispatcher, HarnessError> {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for t in tasks {
            if map.contains_key(&t.task_id) {
                return Err(HarnessError::DuplicateTask(t.task_id));
            }
            order.push(t.task_id);
            map.insert(t.task_id, t);
        }
        Ok(Dispatcher {
            pending: order.iter().copied().collect(),
            order,
            tasks: map,
            attempts: HashMap::new(),
            curves: HashMap::new(),
            results: BTreeMap::new(),
            workers: HashMap::new(),
            rule: PruneRule::new(cfg.theta),
            max_attempts: cfg.max_attempts.max(1),
            started: None,
            finished: None,
        })
    }

    fn done(&self) -> bool {
        self.results.len() == self.tasks.len()
    }

    fn run(&mut self, rx: &mpsc::Receiver<Event>, cfg: &HarnessConfig) -> Result<(), HarnessError> {
        while !self.done() {
            let ev = match cfg.idle_timeout {
                Some(t) => match rx.recv_timeout(t) {
                    Ok(ev) => ev,
                    Err(RecvTimeoutError::Timeout) => return Err(HarnessError::Timeout(t)),
                    Err(RecvTimeoutError::Disconnected) => break,
                },
                None => match rx.recv() {
                    Ok(ev) => ev,
                    Err(_) => break,
                },
            };
            self.handle(ev);
            self.assign();
        }
        Ok(())
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Connected(id, writer) => {
                log::debug!("worker {id} connected");
                self.workers.insert(
                    id,
                    Worker {
                        writer,
                        ready: false,
                        task: None,
                    },
                );
            }
            Event::Malformed(id, msg) => {
                log::warn!("dropping worker {id}: {msg}");
                self.drop_worker(id);
            }
            Event::Closed(id) => self.drop_worker(id),
            Event::Message(id, m) => self.on_message(id, m),
        }
    }

    fn on_message(&mut self, id: ConnId, m: Message) {
        match m {
            Message::Hello => {
                if let Some(w) = self.workers.get_mut(&id) {
                    w.ready = true;
                }
            }
            Message::Progress {
                task_id,
                epoch,
                accuracy,
            } => {
                if self.results.contains_key(&task_id) {
                    return;
                }
                let Some(task) = self.tasks.get(&task_id) else {
                    log::warn!("worker {id} reported progress for unknown task {task_id}");
                    return;
                };
                let total = task.epochs;
                let curve = self.curves.entry(task_id).or_default();
                curve.record(epoch, accuracy);
                if let Decision::Prune { threshold, accuracy } = prune_decision(&self.rule, curve, epoch, total) {
                    let reason = format!("accuracy {accuracy:.4} below {threshold:.4} at epoch {epoch}");
                    log::info!("pruning task {task_id}: {reason}");
                    self.send_to(id, &Message::Prune { task_id, reason });
                    let curve = self.curves.remove(&task_id).unwrap_or_default();
                    self.finish(
                        task_id,
                        TaskStatus::Pruned {
                            epoch,
                            threshold,
                            accuracy,
                        },
                        Some(accuracy),
                        None,
                        curve,
                    );
                }
            }
            Message::Result {
                task_id,
                accuracy,
                latency_ms,
                reason,
            } => {
                if let Some(w) = self.workers.get_mut(&id) {
                    if w.task == Some(task_id) {
                        w.task = None;
                    }
                }
                if self.results.contains_key(&task_id) {
                    log::debug!("ignoring repeated result for task {task_id}");
                    return;
                }
                let Some(task) = self.tasks.get(&task_id) else {
                    log::warn!("worker {id} sent a result for unknown task {task_id}");
                    return;
                };
                let epochs = task.epochs;
                self.pending.retain(|t| *t != task_id);
                let mut curve = self.curves.remove(&task_id).unwrap_or_default();
                let status = match reason {
                    Some(reason) => TaskStatus::Failed { reason },
                    None => {
                        if epochs > 0 {
                            if let Some(acc) = accuracy {
                                if curve.get(epochs).is_none() {
                                    curve.record(epochs, acc);
                                }
                            }
                            if self.rule.offer(&curve) {
                                log::debug!("task {task_id} sets the best curve");
                            }
                        }
                        TaskStatus::Completed
                    }
                };
                self.finish(task_id, status, accuracy, latency_ms, curve);
            }
            Message::Task { .. } | Message::Prune { .. } | Message::Bye => {
                log::warn!("dropping worker {id}: unexpected dispatcher-side message");
                self.drop_worker(id);
            }
        }
    }

    fn finish(
        &mut self,
        task_id: TaskId,
        status: TaskStatus,
        accuracy: Option<f64>,
        latency_ms: Option<f64>,
        curve: AccuracyCurve,
    ) {
        for w in self.workers.values_mut() {
            if w.task == Some(task_id) {
                w.task = None;
            }
        }
        let attempts = self.attempts.get(&task_id).copied().unwrap_or(0);
        self.results.insert(
            task_id,
            TaskResult {
                task_id,
                status,
                accuracy,
                latency_ms,
                curve,
                attempts,
            },
        );
        self.finished = Some(Instant::now());
    }

    fn drop_worker(&mut self, id: ConnId) {
        let Some(w) = self.workers.remove(&id) else { return };
        let _ = w.writer.shutdown(Shutdown::Both);
        if let Some(t) = w.task {
            if self.results.contains_key(&t) {
                return;
            }
            self.curves.remove(&t);
            if self.attempts.get(&t).copied().unwrap_or(0) >= self.max_attempts {
                log::warn!("task {t} failed: lost {} workers", self.max_attempts);
                self.finish(
                    t,
                    TaskStatus::Failed {
                        reason: "worker lost".into(),
                    },
                    None,
                    None,
                    AccuracyCurve::new(),
                );
            } else {
                log::info!("worker {id} lost; requeueing task {t}");
                self.pending.push_front(t);
            }
        }
    }

    fn send_to(&mut self, id: ConnId, m: &Message) -> bool {
        let ok = match self.workers.get_mut(&id) {
            Some(w) => send(&mut w.writer, m).is_ok(),
            None => false,
        };
        if !ok {
            self.drop_worker(id);
        }
        ok
    }

    fn assign(&mut self) {
        loop {
            if self.pending.is_empty() {
                return;
            }
            let mut idle: Vec<ConnId> = self
                .workers
                .iter()
                .filter(|(_, w)| w.ready && w.task.is_none())
                .map(|(id, _)| *id)
                .collect();
            if idle.is_empty() {
                return;
            }
            idle.sort_unstable();
            for id in idle {
                let Some(t) = self.pending.pop_front() else { return };
                let task = &self.tasks[&t];
                let m = Message::Task {
                    task_id: t,
                    kernel_ir: task.kernel_ir.clone(),
                    epochs: task.epochs,
                };
                *self.attempts.entry(t).or_insert(0) += 1;
                if let Some(w) = self.workers.get_mut(&id) {
                    w.task = Some(t);
                }
                self.started.get_or_insert_with(Instant::now);
                // A failed send drops the worker and requeues the task.
                self.send_to(id, &m);
            }
        }
    }

    fn close_all(&mut self) {
        for (_, mut w) in self.workers.drain() {
            let _ = send(&mut w.writer, &Message::Bye);
            let _ = w.writer.shutdown(Shutdown::Write);
        }
    }

    fn report(&self) -> HarnessReport {
        let results: Vec<TaskResult> = self
            .order
            .iter()
            .filter_map(|t| self.results.get(t).cloned())
            .collect();
        let mut leaderboard: Vec<LeaderboardEntry> = results
            .iter()
            .filter(|r| r.status == TaskStatus::Completed)
            .map(|r| LeaderboardEntry {
                task_id: r.task_id,
                accuracy: r.accuracy,
                latency_ms: r.latency_ms,
            })
            .collect();
        let key = |v: Option<f64>| v.unwrap_or(f64::NAN);
        leaderboard.sort_by(|a, b| {
            let (aa, ba) = (key(a.accuracy), key(b.accuracy));
            let acc = match (aa.is_nan(), ba.is_nan()) {
                (false, false) => ba.total_cmp(&aa),
                (a_nan, b_nan) => a_nan.cmp(&b_nan),
            };
            let (al, bl) = (key(a.latency_ms), key(b.latency_ms));
            let lat = match (al.is_nan(), bl.is_nan()) {
                (false, false) => al.total_cmp(&bl),
                (a_nan, b_nan) => a_nan.cmp(&b_nan),
            };
            acc.then(lat).then(a.task_id.cmp(&b.task_id))
        });
        let elapsed = match (self.started, self.finished) {
            (Some(s), Some(f)) if f > s => f - s,
            _ => Duration::ZERO,
        };
        HarnessReport {
            results,
            leaderboard,
            best_curve: self.rule.best.clone(),
            elapsed,
        }
    }
}
