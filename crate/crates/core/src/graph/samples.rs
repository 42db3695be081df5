//! Deterministic sample graphs: the shipped fixtures and a random generator
//! for fuzzing the fusion pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphBuilder, GraphError, GraphIR, MatmulQuant, OpKind, TensorInit, WeightRole};
use crate::tensor::DataType;

/// Hyper-parameters of [`llm_block`].
pub const LLM_HIDDEN: usize = 32;
pub const LLM_HEADS: usize = 4;
pub const LLM_KV_HEADS: usize = 2;
pub const LLM_HEAD_DIM: usize = 8;
pub const LLM_SEQ: usize = 4;
pub const LLM_VOCAB: usize = 16;
pub const LLM_FFN: usize = 64;

fn fc() -> OpKind {
    OpKind::FullyConnected {
        bias: false,
        quant: MatmulQuant::None,
    }
}

fn conv(pad: usize, stride: usize) -> OpKind {
    OpKind::Conv2d { pad, stride, bias: false }
}

fn uniform(seed: u64, scale: f32) -> TensorInit {
    TensorInit::Uniform { seed, scale }
}

/// One decoder block: embedding projection, grouped-query attention and a
/// gated feed-forward, every matmul tagged with its role.
pub fn llm_block() -> Result<GraphIR, GraphError> {
    let (hid, hd) = (LLM_HIDDEN, LLM_HEAD_DIM);
    let kv = LLM_KV_HEADS * hd;
    let mut b = GraphBuilder::new();
    b.input("tokens", &[1, 1, LLM_SEQ, LLM_VOCAB], DataType::F32);
    b.weight("w_embed", &[hid, 1, 1, LLM_VOCAB], uniform(11, 0.5));
    b.weight("g_attn", &[hid], TensorInit::Constant { value: 1.0 });
    b.weight("w_q", &[hid, 1, 1, hid], uniform(12, 0.3));
    b.weight("w_k", &[kv, 1, 1, hid], uniform(13, 0.3));
    b.weight("w_v", &[kv, 1, 1, hid], uniform(14, 0.3));
    b.weight("w_o", &[hid, 1, 1, hid], uniform(15, 0.3));
    b.weight("g_ffn", &[hid], TensorInit::Constant { value: 1.0 });
    b.weight("w_gate", &[LLM_FFN, 1, 1, hid], uniform(16, 0.3));
    b.weight("w_up", &[LLM_FFN, 1, 1, hid], uniform(17, 0.3));
    b.weight("w_down", &[hid, 1, 1, LLM_FFN], uniform(18, 0.2));

    use WeightRole::*;
    b.op_with_role("embed", fc(), &["tokens", "w_embed"], Some(Embedding))?;
    b.op("attn_norm", OpKind::RmsNorm { eps: 1e-6 }, &["embed", "g_attn"])?;
    b.op_with_role("q", fc(), &["attn_norm", "w_q"], Some(AttentionProj))?;
    b.op_with_role("k", fc(), &["attn_norm", "w_k"], Some(AttentionProj))?;
    b.op_with_role("v", fc(), &["attn_norm", "w_v"], Some(AttentionProj))?;
    let rope = |heads, rope| OpKind::RopeQkv {
        heads,
        kv_heads: LLM_KV_HEADS,
        head_dim: hd,
        base: 10000.0,
        rope,
        pos_offset: 0,
    };
    b.op("q_rot", rope(LLM_HEADS, true), &["q"])?;
    b.op("k_rot", rope(LLM_KV_HEADS, true), &["k"])?;
    b.op("v_heads", rope(LLM_KV_HEADS, false), &["v"])?;
    let heads = (LLM_HEADS, LLM_KV_HEADS, hd);
    b.op(
        "attn",
        OpKind::Attention {
            heads: heads.0,
            kv_heads: heads.1,
            head_dim: heads.2,
        },
        &["q_rot", "k_rot", "v_heads"],
    )?;
    b.op(
        "attn_merged",
        OpKind::MergeHeads {
            heads: heads.0,
            kv_heads: heads.1,
            head_dim: heads.2,
        },
        &["attn"],
    )?;
    b.op_with_role("o", fc(), &["attn_merged", "w_o"], Some(AttentionProj))?;
    b.op("resid1", OpKind::Add, &["embed", "o"])?;
    b.op("ffn_norm", OpKind::RmsNorm { eps: 1e-6 }, &["resid1", "g_ffn"])?;
    b.op_with_role("gate", fc(), &["ffn_norm", "w_gate"], Some(FeedForward))?;
    b.op_with_role("up", fc(), &["ffn_norm", "w_up"], Some(FeedForward))?;
    b.op("gate_act", OpKind::Silu, &["gate"])?;
    b.op("gated", OpKind::Mul, &["gate_act", "up"])?;
    b.op_with_role("down", fc(), &["gated", "w_down"], Some(FeedForward))?;
    b.op("resid2", OpKind::Add, &["resid1", "down"])?;
    b.output("resid2");
    b.build()
}

/// Bare attention over pre-transformed inputs, for comparing attention
/// implementations.
pub fn attention() -> Result<GraphIR, GraphError> {
    let (heads, kv_heads, hd, seq) = (4, 2, 8, 6);
    let g = heads / kv_heads;
    let mut b = GraphBuilder::new();
    b.input("q", &[kv_heads, seq * g, hd], DataType::F32);
    b.input("k", &[kv_heads, seq, hd], DataType::F32);
    b.input("v", &[kv_heads, seq, hd], DataType::F32);
    b.op(
        "attn",
        OpKind::Attention {
            heads,
            kv_heads,
            head_dim: hd,
        },
        &["q", "k", "v"],
    )?;
    b.output("attn");
    b.build()
}

/// Encoder/decoder conv stack without skip connections.
pub fn unet_like() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("image", &[1, 32, 32, 4], DataType::F32);
    let mut cur = "image".to_string();
    let mut c = 4;
    let mut seed = 100;
    let mut step = |b: &mut GraphBuilder, cur: &mut String, c: &mut usize, out_c: usize, stride: usize| -> Result<(), GraphError> {
        seed += 1;
        let w = format!("w{seed}");
        b.weight(&w, &[out_c, 3, 3, *c], uniform(seed, 0.2));
        let id = format!("conv{seed}");
        b.op(&id, conv(1, stride), &[cur, &w])?;
        let act = format!("act{seed}");
        b.op(&act, OpKind::Silu, &[&id])?;
        *cur = act;
        *c = out_c;
        Ok(())
    };
    for (out_c, stride) in [(8, 1), (8, 1), (16, 2), (16, 1), (32, 2), (32, 1), (64, 2), (64, 1)] {
        step(&mut b, &mut cur, &mut c, out_c, stride)?;
    }
    // decoder: widen channels with a 1x1 projection, then fold them into space
    let mut hw = 4;
    for (k, out_c) in [32, 16, 8].into_iter().enumerate() {
        let w = format!("w_up{k}");
        b.weight(&w, &[out_c * 4, 1, 1, c], uniform(200 + k as u64, 0.2));
        let id = format!("up{k}");
        b.op(&id, fc(), &[&cur, &w])?;
        hw *= 2;
        let r = format!("unfold{k}");
        b.op(&r, OpKind::Reshape { dims: vec![1, hw, hw, out_c] }, &[&id])?;
        cur = r;
        c = out_c;
        step(&mut b, &mut cur, &mut c, out_c, 1)?;
    }
    b.weight("w_head", &[4, 1, 1, c], uniform(300, 0.2));
    b.op("head", fc(), &[&cur, "w_head"])?;
    b.output("head");
    b.build()
}

/// Token-wise transformer-encoder-like stack with residual adds.
pub fn text_encoder_like() -> Result<GraphIR, GraphError> {
    let (seq, hid) = (16, 32);
    let mut b = GraphBuilder::new();
    b.input("tokens", &[1, 1, seq, hid], DataType::F32);
    let mut cur = "tokens".to_string();
    for l in 0..6u64 {
        let (g, w1, w2) = (format!("g{l}"), format!("w{l}a"), format!("w{l}b"));
        b.weight(&g, &[hid], TensorInit::Constant { value: 1.0 });
        b.weight(&w1, &[hid * 4, 1, 1, hid], uniform(400 + 2 * l, 0.2));
        b.weight(&w2, &[hid, 1, 1, hid * 4], uniform(401 + 2 * l, 0.1));
        let n = format!("norm{l}");
        b.op(&n, OpKind::RmsNorm { eps: 1e-6 }, &[&cur, &g])?;
        let h = format!("ffn{l}a");
        b.op(&h, fc(), &[&n, &w1])?;
        let a = format!("gelu{l}");
        b.op(&a, OpKind::Gelu, &[&h])?;
        let o = format!("ffn{l}b");
        b.op(&o, fc(), &[&a, &w2])?;
        let r = format!("res{l}");
        b.op(&r, OpKind::Add, &[&cur, &o])?;
        cur = r;
    }
    b.output(&cur);
    b.build()
}

/// Decoder-style conv stack that grows spatially.
pub fn vae_like() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("latent", &[1, 4, 4, 16], DataType::F32);
    let (mut cur, mut hw, mut c) = ("latent".to_string(), 4, 16);
    for k in 0..3u64 {
        for j in 0..4u64 {
            let w = format!("w{k}{j}");
            b.weight(&w, &[c, 3, 3, c], uniform(500 + 10 * k + j, 0.1));
            let id = format!("conv{k}{j}");
            b.op(&id, conv(1, 1), &[&cur, &w])?;
            let a = format!("act{k}{j}");
            b.op(&a, OpKind::Silu, &[&id])?;
            cur = a;
        }
        let out_c = c / 2;
        let w = format!("w_up{k}");
        b.weight(&w, &[out_c * 4, 1, 1, c], uniform(600 + k, 0.2));
        let id = format!("up{k}");
        b.op(&id, fc(), &[&cur, &w])?;
        hw *= 2;
        let r = format!("unfold{k}");
        b.op(&r, OpKind::Reshape { dims: vec![1, hw, hw, out_c] }, &[&id])?;
        cur = r;
        c = out_c;
    }
    b.weight("w_rgb", &[3, 3, 3, c], uniform(700, 0.2));
    b.op("rgb", conv(1, 1), &[&cur, "w_rgb"])?;
    b.output("rgb");
    b.build()
}

/// 120 operators in 30 residual blocks of conv, silu, add and scale.
pub fn diffusion_like() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("x", &[1, 8, 8, 8], DataType::F32);
    let mut cur = "x".to_string();
    for k in 0..30u64 {
        let w = format!("w{k}");
        b.weight(&w, &[8, 3, 3, 8], uniform(800 + k, 0.05));
        let (c, a, r, s) = (format!("conv{k}"), format!("silu{k}"), format!("res{k}"), format!("scale{k}"));
        b.op(&c, conv(1, 1), &[&cur, &w])?;
        b.op(&a, OpKind::Silu, &[&c])?;
        b.op(&r, OpKind::Add, &[&cur, &a])?;
        b.op(&s, OpKind::Scale { factor: 0.5 }, &[&r])?;
        cur = s;
    }
    b.output(&cur);
    b.build()
}

/// Two elementwise branches feeding a fully connected layer.
pub fn gated_fc() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("a", &[1, 1, 4, 16], DataType::F32);
    b.input("b", &[1, 1, 4, 16], DataType::F32);
    b.weight("w", &[8, 1, 1, 16], uniform(900, 0.3));
    b.op("branch_a", OpKind::Gelu, &["a"])?;
    b.op("branch_b", OpKind::Scale { factor: 0.5 }, &["b"])?;
    b.op("join", OpKind::Mul, &["branch_a", "branch_b"])?;
    b.op("fc", fc(), &["join", "w"])?;
    b.output("fc");
    b.build()
}

/// Residual add and elementwise ops feeding an RMS norm.
pub fn residual_norm() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("x", &[1, 1, 4, 16], DataType::F32);
    b.input("residual", &[1, 1, 4, 16], DataType::F32);
    b.weight("gamma", &[16], uniform(901, 1.0));
    b.op("act", OpKind::Silu, &["x"])?;
    b.op("sum", OpKind::Add, &["residual", "act"])?;
    b.op("norm", OpKind::RmsNorm { eps: 1e-6 }, &["sum", "gamma"])?;
    b.output("norm");
    b.build()
}

pub fn identity() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("x", &[1, 2, 3, 5], DataType::F32);
    b.op("y", OpKind::Scale { factor: 1.0 }, &["x"])?;
    b.output("y");
    b.build()
}

pub fn single_op() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("x", &[1, 1, 4, 8], DataType::F32);
    b.weight("w", &[8, 1, 1, 8], uniform(1, 0.5));
    b.op("fc", fc(), &["x", "w"])?;
    b.output("fc");
    b.build()
}

pub fn minimal() -> Result<GraphIR, GraphError> {
    let mut b = GraphBuilder::new();
    b.input("x", &[4], DataType::F32);
    b.op("y", OpKind::Relu, &["x"])?;
    b.output("y");
    b.build()
}

/// Every shipped fixture with its file stem.
pub fn fixtures() -> Result<Vec<(&'static str, GraphIR)>, GraphError> {
    Ok(vec![
        ("llm_block", llm_block()?),
        ("attention", attention()?),
        ("unet_like", unet_like()?),
        ("text_encoder_like", text_encoder_like()?),
        ("vae_like", vae_like()?),
        ("diffusion_like", diffusion_like()?),
        ("gated_fc", gated_fc()?),
        ("residual_norm", residual_norm()?),
        ("identity", identity()?),
        ("single_op", single_op()?),
        ("minimal", minimal()?),
        ("random_fusion", random_graph(7)?),
    ])
}

/// Random graph mixing matmuls, norms and elementwise ops, shaped so that
/// every fusion rule has a chance to fire.
pub fn random_graph(seed: u64) -> Result<GraphIR, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let h = rng.gen_range(1..=3);
    let w = rng.gen_range(1..=4);
    let c = *[3usize, 4, 8].choose(&mut rng).unwrap();
    let dims = [1, h, w, c];
    b.input("in0", &dims, DataType::F32);
    let mut pool = vec!["in0".to_string()];
    if rng.gen_bool(0.5) {
        b.input("in1", &dims, DataType::F32);
        pool.push("in1".into());
    }
    let ops = rng.gen_range(3..=10);
    for k in 0..ops {
        let id = format!("n{k}");
        // bias toward recent tensors so chains form
        let pick = |rng: &mut ChaCha8Rng, pool: &[String]| {
            let lo = pool.len().saturating_sub(3);
            pool[rng.gen_range(lo..pool.len())].clone()
        };
        let x = pick(&mut rng, &pool);
        match rng.gen_range(0..10) {
            0 | 1 => {
                let wid = format!("w{k}");
                b.weight(&wid, &[c, 1, 1, c], uniform(seed * 100 + k, 0.5));
                b.op(&id, fc(), &[&x, &wid])?;
            }
            2 => {
                let wid = format!("w{k}");
                b.weight(&wid, &[c, 3, 3, c], uniform(seed * 100 + k, 0.3));
                b.op(&id, conv(1, 1), &[&x, &wid])?;
            }
            3 => {
                let gid = format!("g{k}");
                b.weight(&gid, &[c], uniform(seed * 100 + k, 1.0));
                b.op(&id, OpKind::RmsNorm { eps: 1e-5 }, &[&x, &gid])?;
            }
            4 | 5 => {
                let y = pick(&mut rng, &pool);
                let kind = [OpKind::Add, OpKind::Sub, OpKind::Mul].choose(&mut rng).unwrap().clone();
                b.op(&id, kind, &[&x, &y])?;
            }
            _ => {
                let kind = match rng.gen_range(0..5) {
                    0 => OpKind::Relu,
                    1 => OpKind::Gelu,
                    2 => OpKind::Silu,
                    3 => OpKind::Scale {
                        factor: rng.gen_range(-1.5f32..1.5),
                    },
                    _ => OpKind::AddConst {
                        value: rng.gen_range(-1.0f32..1.0),
                    },
                };
                b.op(&id, kind, &[&x])?;
            }
        }
        pool.push(id);
    }
    b.output(&format!("n{}", ops - 1));
    if ops > 3 && rng.gen_bool(0.3) {
        b.output(&format!("n{}", rng.gen_range(0..ops - 1)));
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let all = fixtures().unwrap();
        assert_eq!(all.len(), 12);
        let diffusion = diffusion_like().unwrap();
        assert_eq!(diffusion.nodes.len(), 120);
    }

    #[test]
    fn random_graphs_are_valid_and_deterministic() {
        for seed in 0..50 {
            let g = random_graph(seed).unwrap();
            assert_eq!(g, random_graph(seed).unwrap());
        }
    }
}
