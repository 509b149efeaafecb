use std::process::Command;

fn status(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_gridest"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

#[test]
fn binary_exit_codes() {
    assert_eq!(status(&["complexity"]), 0);
    assert_eq!(status(&["complexity", "--seed", "x"]), 2);
    assert_eq!(
        status(&["complexity", "--config", "/nonexistent/config"]),
        2
    );
    assert_eq!(status(&["detect", "--seed", "2"]), 1);
}
