pub mod cli;
pub mod encoder;
pub mod enricher;
pub mod harness;
pub mod kb_store;
pub mod neural_kernels;
pub mod reknet_model;
pub mod text_prep;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/knowledge_base.md")]
    mod knowledge_base {}
    #[doc = include_str!("../../../book/src/enrichment.md")]
    mod enrichment {}
    #[doc = include_str!("../../../book/src/reference_spans.md")]
    mod reference_spans {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
