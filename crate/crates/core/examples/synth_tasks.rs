//! Generates fine and coarse samples, shows their grids and checks the rule
//! evaluator and pooling behaviour on the code grid.

use dpn::synth::{evaluate_rule, gen_coarse, gen_fine, pool_codes, write_dataset, Tag, TaskConfig};

fn show(cells: &[usize], (h, w): (usize, usize)) {
    for r in 0..h {
        let row: Vec<String> = cells[r * w..(r + 1) * w].iter().map(usize::to_string).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> dpn::Result<()> {
    let fine = gen_fine(7, 6, 6)?;
    println!("fine sample, prompt {:?}, answer {:?}", fine.prompt, fine.answer);
    show(&fine.cells, fine.grid);
    let (pooled, ph, pw) = pool_codes(&fine.cells, fine.grid, (2, 2));
    println!("after 2x2 max-pool (marker gone: {})", !pooled.contains(&dpn::synth::MARKER));
    show(&pooled, (ph, pw));

    let coarse = gen_coarse(7, 6, 6)?;
    println!("coarse sample, answer {:?}", coarse.answer);
    show(&coarse.cells, coarse.grid);
    let (pooled, ph, pw) = pool_codes(&coarse.cells, coarse.grid, (2, 2));
    println!("rule on 2x2-pooled grid: {:?}", evaluate_rule(Tag::Coarse, &pooled, (ph, pw)));

    let task = TaskConfig::default();
    let set = task.dataset(1, 1000)?;
    let solved = set.iter().filter(|s| evaluate_rule(s.tag, &s.cells, s.grid).as_deref() == Some(&s.answer[..])).count();
    let fine_count = set.iter().filter(|s| s.tag == Tag::Fine).count();
    println!("1000-sample stream: {fine_count} fine, rule reproduces {solved}/1000 answers");

    let mut buf = Vec::new();
    write_dataset(&mut buf, &task, 1, &set[..3])?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
