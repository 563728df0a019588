use std::sync::Arc;
use std::time::Duration;

use canvas_core::harness::mock::{run_mock_worker, spawn_mock_workers, MockBehavior};
use canvas_core::harness::{EvalTask, Harness, HarnessConfig, TaskStatus};

fn tasks(n: u64, epochs: u32) -> Vec<EvalTask> {
    (0..n)
        .map(|task_id| EvalTask {
            task_id,
            kernel_ir: format!("canvas-ir v1\n# task {task_id}\n"),
            epochs,
        })
        .collect()
}

fn cfg() -> HarnessConfig {
    HarnessConfig {
        idle_timeout: Some(Duration::from_secs(20)),
        ..HarnessConfig::default()
    }
}

#[test]
fn every_task_gets_one_result() {
    let h = Harness::bind("127.0.0.1:0").unwrap();
    let addr = h.local_addr().unwrap();
    let b = MockBehavior {
        duplicate_results: true,
        ..MockBehavior::default()
    };
    let workers = spawn_mock_workers(addr, 4, &b);
    let report = h.run(tasks(40, 3), &cfg()).unwrap();
    assert_eq!(report.results.len(), 40);
    for (i, r) in report.results.iter().enumerate() {
        assert_eq!(r.task_id, i as u64);
        assert_eq!(r.status, TaskStatus::Completed);
        assert_eq!(r.attempts, 1);
    }
    let total: usize = workers.into_iter().map(|w| w.join().unwrap().unwrap().tasks.len()).sum();
    assert_eq!(total, 40);
}

#[test]
fn lost_worker_requeues_task() {
    let h = Harness::bind("127.0.0.1:0").unwrap();
    let addr = h.local_addr().unwrap();
    let flaky = MockBehavior {
        disconnect_on_task: Some(0),
        ..MockBehavior::default()
    };
    let bad = MockBehavior {
        malformed_on_task: Some(0),
        ..MockBehavior::default()
    };
    // Both faulty workers grab a task before the healthy one connects.
    let f = std::thread::spawn(move || run_mock_worker(addr, &flaky));
    let m = std::thread::spawn(move || run_mock_worker(addr, &bad));
    let runner = std::thread::spawn(move || h.run(tasks(6, 2), &cfg()));
    std::thread::sleep(Duration::from_millis(300));
    let good = spawn_mock_workers(addr, 1, &MockBehavior::default());
    let report = runner.join().unwrap().unwrap();
    assert!(report.results.iter().all(|r| r.status == TaskStatus::Completed));
    assert!(report.results.iter().any(|r| r.attempts > 1));
    assert_eq!(f.join().unwrap().unwrap().completed.len(), 0);
    assert_eq!(m.join().unwrap().unwrap().completed.len(), 0);
    assert_eq!(good.into_iter().next().unwrap().join().unwrap().unwrap().completed.len(), 6);
}

#[test]
fn weak_candidates_are_pruned() {
    let h = Harness::bind("127.0.0.1:0").unwrap();
    let addr = h.local_addr().unwrap();
    // Task 0 sets the curve at 0.8; task 1 runs at 0.3, below half of it.
    let b = MockBehavior {
        latency: Duration::from_millis(30),
        accuracy: Arc::new(|t, _, _| if t == 0 { 0.8 } else { 0.3 }),
        ..MockBehavior::default()
    };
    let w = spawn_mock_workers(addr, 1, &b);
    let report = h.run(tasks(2, 5), &cfg()).unwrap();
    assert_eq!(report.results[0].status, TaskStatus::Completed);
    match report.results[1].status {
        TaskStatus::Pruned { epoch, threshold, accuracy } => {
            assert_eq!(epoch, 1);
            assert!((threshold - 0.8 * 0.6).abs() < 1e-12);
            assert_eq!(accuracy, 0.3);
        }
        ref s => panic!("expected a prune, got {s:?}"),
    }
    let log = w.into_iter().next().unwrap().join().unwrap().unwrap();
    assert_eq!(log.pruned, vec![1]);
    assert_eq!(log.progress.iter().filter(|(t, _)| *t == 1).count(), 1);
    assert_eq!(report.leaderboard.len(), 1);
}

#[test]
fn leaderboard_orders_by_accuracy_then_latency() {
    let h = Harness::bind("127.0.0.1:0").unwrap();
    let addr = h.local_addr().unwrap();
    let b = MockBehavior {
        accuracy: Arc::new(|t, e, total| if e == total { [0.5, 0.7, 0.7][t as usize] } else { 0.9 }),
        ..MockBehavior::default()
    };
    let _w = spawn_mock_workers(addr, 1, &b);
    let report = h.run(tasks(3, 1), &cfg()).unwrap();
    let order: Vec<u64> = report.leaderboard.iter().map(|e| e.task_id).collect();
    assert_eq!(order, vec![1, 2, 0]);
}

#[test]
fn latency_only_tasks() {
    let h = Harness::bind("127.0.0.1:0").unwrap();
    let addr = h.local_addr().unwrap();
    let b = MockBehavior {
        latency_ms: 4.5,
        ..MockBehavior::default()
    };
    let _w = spawn_mock_workers(addr, 2, &b);
    let report = h.run(tasks(5, 0), &cfg()).unwrap();
    assert!(report.results.iter().all(|r| r.latency_ms == Some(4.5) && r.accuracy.is_none()));
    assert!(report.best_curve.is_none());
}

#[test]
fn idle_timeout_without_workers() {
    let h = Harness::bind("127.0.0.1:0").unwrap();
    let c = HarnessConfig {
        idle_timeout: Some(Duration::from_millis(100)),
        ..HarnessConfig::default()
    };
    assert!(h.run(tasks(1, 1), &c).is_err());
}
