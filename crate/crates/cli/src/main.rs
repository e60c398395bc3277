fn main() {
    std::process::exit(mmchat_cli::run(std::env::args_os()));
}
