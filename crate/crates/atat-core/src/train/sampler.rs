//! Weighted task-mixed batch sampling: each batch slot independently draws
//! a task with probability proportional to its weight, then a uniform
//! instance from that task. Batches may mix tasks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::TaskInstance;
use crate::text::TaskKind;

use super::TrainError;

/// A task's instances plus its sampling weight. By convention the recipes
/// default weights to dataset size, which makes mixing proportional.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task: TaskKind,
    pub instances: Vec<TaskInstance>,
    pub sampling_weight: f64,
}

impl TaskDataset {
    pub fn new(task: TaskKind, instances: Vec<TaskInstance>) -> Self {
        let sampling_weight = instances.len() as f64;
        Self { task, instances, sampling_weight }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.sampling_weight = w;
        self
    }
}

/// Draw `(dataset index, instance index)` pairs for one batch.
pub fn sample_batch(
    datasets: &[TaskDataset],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>, TrainError> {
    let weights: Vec<f64> = datasets
        .iter()
        .map(|d| if d.instances.is_empty() { 0.0 } else { d.sampling_weight.max(0.0) })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(TrainError::EmptyMixture);
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut u = rng.gen::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let n = datasets[pick].instances.len();
        out.push((pick, rng.gen_range(0..n)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceData;
    use crate::text::{TargetSequence, EOS_ID};
    use crate::util::rng_from_seed;

    fn fake_dataset(task: TaskKind, n: usize) -> TaskDataset {
        let instances = (0..n)
            .map(|i| TaskInstance {
                id: format!("{}-{i}", task.name()),
                domain: "d".into(),
                task: task.clone(),
                source: SourceData::Text(vec![5]),
                target: TargetSequence { task: task.clone(), tokens: vec![4, 5, EOS_ID] },
            })
            .collect();
        TaskDataset::new(task, instances)
    }

    #[test]
    fn zero_weight_tasks_are_never_drawn() {
        let datasets = vec![
            fake_dataset(TaskKind::Slu, 10).with_weight(1.0),
            fake_dataset(TaskKind::Asr, 10).with_weight(0.0),
        ];
        let mut rng = rng_from_seed(1);
        let batch = sample_batch(&datasets, 64, &mut rng).unwrap();
        assert!(batch.iter().all(|&(ds, _)| ds == 0));
    }

    #[test]
    fn equal_weights_concentrate_near_half() {
        let datasets = vec![
            fake_dataset(TaskKind::Slu, 10).with_weight(1.0),
            fake_dataset(TaskKind::Asr, 10).with_weight(1.0),
        ];
        let mut rng = rng_from_seed(7);
        let mut slu = 0usize;
        let n = 10_000;
        for (ds, _) in sample_batch(&datasets, n, &mut rng).unwrap() {
            slu += (ds == 0) as usize;
        }
        // Binomial concentration: 0.5 +- 0.02 at n = 10k is ~4 sigma.
        let frac = slu as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn same_seed_same_batch() {
        let datasets = vec![fake_dataset(TaskKind::Slu, 50), fake_dataset(TaskKind::Nlu, 50)];
        let b1 = sample_batch(&datasets, 16, &mut rng_from_seed(9)).unwrap();
        let b2 = sample_batch(&datasets, 16, &mut rng_from_seed(9)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn empty_mixture_is_an_error() {
        let datasets = vec![fake_dataset(TaskKind::Slu, 0).with_weight(1.0)];
        let mut rng = rng_from_seed(1);
        assert!(matches!(
            sample_batch(&datasets, 4, &mut rng),
            Err(TrainError::EmptyMixture)
        ));
    }
}
