//! Pooled hidden states of two domains projected onto two principal axes.

use adauda::analysis::{extract_hidden, pca_project_2d, Pooling};
use adauda::data::{build_vocab, gen_synthetic, SynthSpec};
use adauda::model::{init_model, ModelConfig};
use adauda::tensor::Tensor;

fn main() -> adauda::Result<()> {
    let spec = SynthSpec {
        n_domains: 2,
        docs_per_domain: 100,
        test_docs_per_domain: 50,
        unlabeled_per_domain: 0,
        shared_fraction: 0.2,
        ..SynthSpec::default()
    };
    let domains = gen_synthetic(&spec)?;
    let vocab = build_vocab(domains.iter().flat_map(|d| d.train.texts()), 2000)?;
    let config = ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 2,
        ffn_dim: 64,
        adapter_dim: 8,
        vocab_size: vocab.len(),
        max_len: 32,
        n_classes: 2,
        adapters_enabled: true,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let params = init_model::<f32>(&config, 3)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for d in &domains {
        let corpus = d.test.encode(&vocab);
        rows.extend_from_slice(
            extract_hidden(&params, &config, &corpus, Pooling::Mean, 32)?.data(),
        );
        labels.extend(std::iter::repeat_n(d.domain_id.clone(), corpus.len()));
    }
    let all = Tensor::new(vec![labels.len(), config.hidden], rows)?;
    let p = pca_project_2d(&all)?;
    println!(
        "explained variance {:.4} {:.4}",
        p.explained[0], p.explained[1]
    );
    for d in &domains {
        let (n, sx, sy) = p
            .coords
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == d.domain_id)
            .fold((0.0, 0.0, 0.0), |(n, x, y), (c, _)| {
                (n + 1.0, x + c[0], y + c[1])
            });
        println!("{} centroid ({:.3}, {:.3})", d.domain_id, sx / n, sy / n);
    }
    Ok(())
}
