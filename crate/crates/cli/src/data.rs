use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use emocvae::corpus::{read_corpus, write_corpus, CorpusSplit, Vocabulary, DEFAULT_MAX_LEN};
use emocvae::pipeline::PreparedData;

pub const PARTITIONS: [&str; 3] = ["train", "dev", "test"];
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn partition_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.tsv"))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

/// Writes the three partitions and the vocabulary; returns the written paths.
pub fn write_data_dir(dir: &Path, data: &PreparedData) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, pairs) in data.split.partitions() {
        let path = partition_path(dir, name);
        let mut w = create(&path)?;
        write_corpus(pairs, &mut w)?;
        w.flush()?;
        paths.push(path);
    }
    let path = dir.join(VOCAB_FILE);
    let mut w = create(&path)?;
    data.vocab.write(&mut w)?;
    w.flush()?;
    paths.push(path);
    Ok(paths)
}

pub fn data_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = PARTITIONS.iter().map(|n| partition_path(dir, n)).collect();
    v.push(dir.join(VOCAB_FILE));
    v
}

/// Loads a data directory and checks that its vocabulary file matches the
/// vocabulary rebuilt from the training partition.
pub fn read_data_dir(dir: &Path, split_seed: u64) -> Result<PreparedData> {
    let mut parts = Vec::new();
    for name in PARTITIONS {
        let path = partition_path(dir, name);
        let pairs = read_corpus(open(&path)?, DEFAULT_MAX_LEN)
            .with_context(|| format!("parsing {}", path.display()))?;
        parts.push(pairs);
    }
    let test = parts.pop().unwrap_or_default();
    let dev = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    let data = PreparedData::from_split(CorpusSplit {
        train,
        dev,
        test,
        seed: split_seed,
    })?;
    let stored = Vocabulary::read(open(&dir.join(VOCAB_FILE))?)?;
    if stored != data.vocab {
        bail!(
            "{} does not match the training partition",
            dir.join(VOCAB_FILE).display()
        );
    }
    Ok(data)
}

pub fn check_vocab(model_vocab: &Vocabulary, data: &PreparedData, what: &str) -> Result<()> {
    if *model_vocab != data.vocab {
        bail!("{what} was trained on a different vocabulary than the data directory");
    }
    Ok(())
}
