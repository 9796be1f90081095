use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    training: AtomicUsize,
    evaluation: AtomicUsize,
    eval_depth: AtomicUsize,
}

/// Counts every read of quarantined ground-truth labels.
///
/// Reads are attributed to evaluation while an [`EvaluationScope`] is alive
/// and to training otherwise. Clones share the same counters.
#[derive(Debug, Clone, Default)]
pub struct LabelAudit(Arc<Counters>);

impl LabelAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn evaluation_scope(&self) -> EvaluationScope {
        self.0.eval_depth.fetch_add(1, Ordering::SeqCst);
        EvaluationScope(self.clone())
    }

    pub fn in_evaluation(&self) -> bool {
        self.0.eval_depth.load(Ordering::SeqCst) > 0
    }

    pub fn training_reads(&self) -> usize {
        self.0.training.load(Ordering::SeqCst)
    }

    pub fn evaluation_reads(&self) -> usize {
        self.0.evaluation.load(Ordering::SeqCst)
    }

    pub(crate) fn record(&self, n: usize) {
        let counter = if self.in_evaluation() { &self.0.evaluation } else { &self.0.training };
        counter.fetch_add(n, Ordering::SeqCst);
    }
}

/// Guard returned by [`LabelAudit::evaluation_scope`].
#[derive(Debug)]
pub struct EvaluationScope(LabelAudit);

impl Drop for EvaluationScope {
    fn drop(&mut self) {
        self.0 .0.eval_depth.fetch_sub(1, Ordering::SeqCst);
    }
}
