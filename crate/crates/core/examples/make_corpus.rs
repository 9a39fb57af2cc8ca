//! Writes a synthetic PGM corpus: `make_corpus <dir> <count> <width> <height> <seed>`.

use latq::synth;

fn main() -> latq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() != 5 {
        eprintln!("usage: make_corpus <dir> <count> <width> <height> <seed>");
        std::process::exit(1);
    }
    let num = |i: usize| -> u64 { args[i].parse().unwrap_or_else(|_| panic!("not a number: {}", args[i])) };
    let dir = std::path::Path::new(&args[0]);
    std::fs::create_dir_all(dir)?;
    for (i, img) in synth::corpus(num(1) as usize, num(2) as usize, num(3) as usize, num(4)).iter().enumerate() {
        img.write_pgm(dir.join(format!("tex{i:02}.pgm")))?;
    }
    Ok(())
}
