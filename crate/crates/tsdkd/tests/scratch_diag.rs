use tsdkd::distill::{task_datasets, TrainConfig};
use tsdkd::harness::{extract_answer, TaskKind};
use tsdkd::lm::{checkpoint, greedy_decode, TaskCodec, EOS};

#[test]
fn inspect_teacher_errors() {
    let model = checkpoint::load(std::path::Path::new("/tmp/calib/run0/teacher.ckpt")).unwrap();
    let cfg = TrainConfig {
        task: TaskKind::Addition,
        digits_min: 2,
        digits_max: 3,
        eval_size: 128,
        train_size: 4096,
        max_response_len: 24,
        context: 48,
        seed: 0,
        ..TrainConfig::default()
    };
    let codec = TaskCodec::new();
    let (_, eval) = task_datasets(&cfg).unwrap();
    let mut wrong = 0;
    for item in eval.iter().take(40) {
        let prompt = codec.encode_prompt(&item.prompt).unwrap();
        let out = greedy_decode(&model, &prompt, 24, Some(EOS)).unwrap();
        let text = codec.decode(&out).unwrap();
        let got = extract_answer(&item.prompt, &text);
        if got != item.answer {
            wrong += 1;
            println!("{:<10} ref {:<16} got {:<20} ans {} vs {}", item.prompt, item.trace, text, item.answer, got);
        }
    }
    println!("{wrong}/40 wrong");
}
