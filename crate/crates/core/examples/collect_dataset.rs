//! Collect scripted play, write it to disk, read it back and sample a
//! padded training window.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taco_rl::datastore::{load_dataset, sample_window, write_dataset, EpisodeRecord};
use taco_rl::env::{scripted_collect, ControllerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let episodes = scripted_collect(&mut rng, 4, 300, ControllerConfig::default());
    let dir = std::env::temp_dir().join("taco-example-dataset");
    let records: Vec<EpisodeRecord> = episodes.iter().map(|e| e.record.clone()).collect();
    let manifest = write_dataset(&records, &dir, Some(0), true)?;
    println!("wrote {} episodes to {}", manifest.episode_count, dir.display());
    for seg in episodes[0].segments.iter().take(5) {
        println!("  segment {}", seg.to_line());
    }

    let ds = load_dataset(&dir)?;
    let w = sample_window(&mut rng, &ds);
    println!("window: episode {} start {} real steps {} of {}", w.episode, w.start, w.raw_len, w.mask.len());
    Ok(())
}
