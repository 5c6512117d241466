//! Word-aligned audio masking for the masked-audio LM task: a fraction of
//! the aligned words is chosen and their sample spans are zeroed.

use rand::Rng;

use super::{AudioError, Waveform, WordAlignment};
use crate::util::rng_from_seed;

/// Zero the audio of `max(1, round(fraction * word_count))` distinct words
/// chosen uniformly under `seed`. Returns the masked waveform and the sorted
/// indices of the masked words. All samples outside the chosen spans are
/// bit-identical to the input.
pub fn mask_audio(
    w: &Waveform,
    alignment: &WordAlignment,
    fraction: f64,
    seed: u64,
) -> Result<(Waveform, Vec<usize>), AudioError> {
    assert!(fraction > 0.0 && fraction < 1.0, "fraction must be in (0, 1)");
    let n_words = alignment.entries.len();
    assert!(n_words > 0, "alignment must be non-empty");

    let sr = w.sample_rate as f64;
    let spans: Vec<(usize, usize)> = alignment
        .entries
        .iter()
        .map(|e| {
            let start = (e.start_ms * sr / 1000.0).round() as usize;
            let end = (e.end_ms * sr / 1000.0).round() as usize;
            if end > w.samples.len() {
                return Err(AudioError::AlignmentOutOfRange(format!(
                    "word '{}' ends at sample {end} but waveform has {}",
                    e.word,
                    w.samples.len()
                )));
            }
            Ok((start, end))
        })
        .collect::<Result<_, _>>()?;

    let k = ((fraction * n_words as f64 + 0.5).floor() as usize).max(1);

    // Partial Fisher-Yates: the first k slots of a shuffled index vector.
    let mut rng = rng_from_seed(seed);
    let mut idx: Vec<usize> = (0..n_words).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n_words);
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..k].to_vec();
    chosen.sort_unstable();

    let mut samples = w.samples.clone();
    for &wi in &chosen {
        let (s, e) = spans[wi];
        samples[s..e].iter_mut().for_each(|v| *v = 0);
    }

    Ok((Waveform { samples, sample_rate: w.sample_rate }, chosen))
}
