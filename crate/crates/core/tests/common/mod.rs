#![allow(dead_code)]

use std::path::PathBuf;

use emocvae::corpus::{Emotion, TokenId, NUM_SPECIALS};
use emocvae::masks::{
    build_decoder_layout, build_decoder_mask, build_encoder_layout, build_encoder_mask, Mode,
};

pub struct GoldenGrid {
    pub name: String,
    pub roles: Vec<String>,
    pub rows: Vec<String>,
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
}

pub fn read_golden(name: &str) -> GoldenGrid {
    let text = std::fs::read_to_string(golden_dir().join(name)).expect("golden file");
    let mut lines = text.lines();
    let roles = lines
        .next()
        .expect("header")
        .strip_prefix("roles ")
        .expect("roles header");
    GoldenGrid {
        name: name.to_string(),
        roles: roles.split_whitespace().map(String::from).collect(),
        rows: lines.map(String::from).collect(),
    }
}

fn ids(n: usize, base: usize) -> Vec<TokenId> {
    (0..n)
        .map(|i| (NUM_SPECIALS + base + i) as TokenId)
        .collect()
}

/// Every golden case paired with the grid the library builds for it.
pub fn golden_cases() -> Vec<(GoldenGrid, GoldenGrid)> {
    let mut out = Vec::new();
    let e = Some(Emotion::Sadness);
    let built = |name: String,
                 layout: emocvae::masks::TokenLayout,
                 mask: emocvae::masks::AttentionMask| GoldenGrid {
        name,
        roles: layout.roles().iter().map(|r| r.tag().to_string()).collect(),
        rows: mask.to_string().lines().map(String::from).collect(),
    };
    for p in 1..=3 {
        let post = ids(p, 0);
        let name = format!("encoder_test_p{p}.txt");
        let l = build_encoder_layout(&post, None, e, Mode::Test).unwrap();
        let m = build_encoder_mask(&l);
        out.push((read_golden(&name), built(name, l, m)));
        let name = format!("decoder_test_p{p}.txt");
        let l = build_decoder_layout(&post, None, Mode::Test).unwrap();
        let m = build_decoder_mask(&l);
        out.push((read_golden(&name), built(name, l, m)));
        for r in 1..=3 {
            let resp = ids(r, 10);
            let name = format!("encoder_train_p{p}_r{r}.txt");
            let l = build_encoder_layout(&post, Some(&resp), e, Mode::Train).unwrap();
            let m = build_encoder_mask(&l);
            out.push((read_golden(&name), built(name, l, m)));
            let name = format!("decoder_train_p{p}_r{r}.txt");
            let l = build_decoder_layout(&post, Some(&resp), Mode::Train).unwrap();
            let m = build_decoder_mask(&l);
            out.push((read_golden(&name), built(name, l, m)));
        }
    }
    out
}
